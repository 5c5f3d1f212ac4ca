#ifndef EDGETP_H
#define EDGETP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EdgetpBlockKind {
  EDGETP_BLOCK_KIND_MHA = 0,
  EDGETP_BLOCK_KIND_MLP = 1,
  EDGETP_BLOCK_KIND_LM_HEAD = 2,
} EdgetpBlockKind;

typedef enum EdgetpScheduler {
  EDGETP_SCHEDULER_COMP_GREEDY = 0,
  EDGETP_SCHEDULER_MIN_MAX = 1,
  EDGETP_SCHEDULER_VANILLA_EVEN = 2,
  EDGETP_SCHEDULER_GALAXY_TWO_STEP = 3,
} EdgetpScheduler;

typedef enum EdgetpStatus {
  EDGETP_STATUS_OK = 0,
  EDGETP_STATUS_NULL_POINTER = 1,
  EDGETP_STATUS_INVALID_ARGUMENT = 2,
  EDGETP_STATUS_INSUFFICIENT_MEMORY = 3,
  EDGETP_STATUS_INFEASIBLE = 4,
  EDGETP_STATUS_IO = 5,
  EDGETP_STATUS_FORMAT = 6,
  EDGETP_STATUS_BUFFER_TOO_SMALL = 7,
  EDGETP_STATUS_PANIC = 8,
  EDGETP_STATUS_OTHER = 9,
} EdgetpStatus;

typedef struct EdgetpModel EdgetpModel;

typedef struct EdgetpSchedule EdgetpSchedule;

// Model dimensions; `edgetp_model_spec_default` fills one in.
typedef struct EdgetpModelSpec {
  uint32_t num_layers;
  uint32_t hidden_dim;
  uint32_t num_heads;
  uint32_t num_kv_heads;
  uint32_t mlp_groups;
  uint32_t vocab_groups;
  uint32_t group_size;
  uint64_t seed;
} EdgetpModelSpec;

// Device description passed by value from C.
typedef struct EdgetpDevice {
  double memory_mb;
  double compute;
  double plr;
} EdgetpDevice;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after success.
// The pointer stays valid until the next call on this thread.
const char *edgetp_last_error(void);

struct EdgetpModelSpec edgetp_model_spec_default(void);

// Initialise a model with seeded random weights.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum EdgetpStatus edgetp_model_init(struct EdgetpModelSpec spec, struct EdgetpModel **out);

// Load a model from a weight file.
//
// # Safety
// `file` must be a NUL-terminated string; `out` as for [`edgetp_model_init`].
enum EdgetpStatus edgetp_model_load(const char *file, struct EdgetpModel **out);

// # Safety
// `model` must come from this library; `file` must be NUL-terminated.
enum EdgetpStatus edgetp_model_save(const struct EdgetpModel *model, const char *file);

// Vocabulary size, or 0 for a null handle.
//
// # Safety
// `model` must be null or come from this library.
uintptr_t edgetp_model_vocab_size(const struct EdgetpModel *model);

// Number of groups of `kind` per layer, or 0 for a null handle.
//
// # Safety
// `model` must be null or come from this library.
uintptr_t edgetp_model_group_count(const struct EdgetpModel *model, enum EdgetpBlockKind kind);

// Dense forward pass over `tokens`; writes the last position's logits.
//
// # Safety
// `tokens` must point to `n` values and `logits` to `cap` writable floats.
enum EdgetpStatus edgetp_model_forward(const struct EdgetpModel *model,
                                       const uint32_t *tokens,
                                       uintptr_t n,
                                       float *logits,
                                       uintptr_t cap);

// # Safety
// `model` must be null or a handle from this library not yet freed.
void edgetp_model_free(struct EdgetpModel *model);

// Min-max workload ratios for `n` devices and a model of `total_mb`.
//
// # Safety
// `devices` must point to `n` entries and `ratios` to `n` writable doubles.
enum EdgetpStatus edgetp_min_max_ratios(const struct EdgetpDevice *devices,
                                        uintptr_t n,
                                        double total_mb,
                                        double epsilon,
                                        double *ratios);

// Build a schedule for `model` on `n` devices. With `total_mb > 0` the
// model is treated as occupying that many MB; otherwise 4 bytes per
// parameter.
//
// # Safety
// `model` must come from this library, `devices` must point to `n`
// entries and `out` to writable storage for one handle.
enum EdgetpStatus edgetp_schedule_build(const struct EdgetpModel *model,
                                        enum EdgetpScheduler scheduler,
                                        const struct EdgetpDevice *devices,
                                        uintptr_t n,
                                        double total_mb,
                                        struct EdgetpSchedule **out);

// Number of devices, or 0 for a null handle.
//
// # Safety
// `schedule` must be null or come from this library.
uintptr_t edgetp_schedule_num_devices(const struct EdgetpSchedule *schedule);

// Copy a device's 1-based priority indices for `kind` into `out`.
// `len` receives the full count even when `cap` is too small.
//
// # Safety
// `out` must point to `cap` writable values and `len` to one.
enum EdgetpStatus edgetp_schedule_indices(const struct EdgetpSchedule *schedule,
                                          uintptr_t device,
                                          enum EdgetpBlockKind kind,
                                          uint32_t *out,
                                          uintptr_t cap,
                                          uintptr_t *len);

// # Safety
// `schedule` must be null or a handle from this library not yet freed.
void edgetp_schedule_free(struct EdgetpSchedule *schedule);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EDGETP_H */
