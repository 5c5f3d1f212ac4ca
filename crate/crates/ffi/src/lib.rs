//! C interface to the scheduler and the toy model.
//!
//! Every fallible function returns an [`EdgetpStatus`]; on failure the
//! message is available from [`edgetp_last_error`] on the same thread.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use edgetp::harness::{build_schedule, SchedulerKind};
use edgetp::model::{dense_forward, init_model, BlockKind, ModelSpec, WeightStore};
use edgetp::scheduler::{min_max, CostModel, CostScale, DeviceProfile, Schedule};
use edgetp::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgetpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InsufficientMemory = 3,
    Infeasible = 4,
    Io = 5,
    Format = 6,
    BufferTooSmall = 7,
    Panic = 8,
    Other = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgetpScheduler {
    CompGreedy = 0,
    MinMax = 1,
    VanillaEven = 2,
    GalaxyTwoStep = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgetpBlockKind {
    Mha = 0,
    Mlp = 1,
    LmHead = 2,
}

/// Device description passed by value from C.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgetpDevice {
    pub memory_mb: f64,
    pub compute: f64,
    pub plr: f64,
}

/// Model dimensions; `edgetp_model_spec_default` fills one in.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgetpModelSpec {
    pub num_layers: u32,
    pub hidden_dim: u32,
    pub num_heads: u32,
    pub num_kv_heads: u32,
    pub mlp_groups: u32,
    pub vocab_groups: u32,
    pub group_size: u32,
    pub seed: u64,
}

pub struct EdgetpModel(WeightStore);

pub struct EdgetpSchedule(Schedule);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Failure(EdgetpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InsufficientMemory { .. } | Error::OutOfMemory { .. } => EdgetpStatus::InsufficientMemory,
            Error::Infeasible(_) => EdgetpStatus::Infeasible,
            Error::Io(_) => EdgetpStatus::Io,
            Error::Format(_) => EdgetpStatus::Format,
            Error::Dimension(_)
            | Error::TokenOutOfRange { .. }
            | Error::LengthMismatch(_)
            | Error::Config(_) => EdgetpStatus::InvalidArgument,
            _ => EdgetpStatus::Other,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: EdgetpStatus, msg: &str) -> Failure {
    Failure(status, msg.to_string())
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EdgetpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            EdgetpStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            EdgetpStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(EdgetpStatus::NullPointer, "null array"));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(EdgetpStatus::NullPointer, "null path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(EdgetpStatus::InvalidArgument, "path is not UTF-8"))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(EdgetpStatus::NullPointer, "null handle"))
}

fn profiles(devices: &[EdgetpDevice]) -> Vec<DeviceProfile> {
    devices
        .iter()
        .enumerate()
        .map(|(i, d)| DeviceProfile::new(i, d.memory_mb, d.compute, d.plr))
        .collect()
}

fn block_kind(k: EdgetpBlockKind) -> BlockKind {
    match k {
        EdgetpBlockKind::Mha => BlockKind::Mha,
        EdgetpBlockKind::Mlp => BlockKind::Mlp,
        EdgetpBlockKind::LmHead => BlockKind::LmHead,
    }
}

/// Message of the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn edgetp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn edgetp_model_spec_default() -> EdgetpModelSpec {
    let s = ModelSpec::default();
    EdgetpModelSpec {
        num_layers: s.num_layers as u32,
        hidden_dim: s.hidden_dim as u32,
        num_heads: s.num_heads as u32,
        num_kv_heads: s.num_kv_heads as u32,
        mlp_groups: s.mlp_groups as u32,
        vocab_groups: s.vocab_groups as u32,
        group_size: s.group_size as u32,
        seed: s.seed,
    }
}

/// Initialise a model with seeded random weights.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn edgetp_model_init(spec: EdgetpModelSpec, out: *mut *mut EdgetpModel) -> EdgetpStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(EdgetpStatus::NullPointer, "null output"));
        }
        let spec = ModelSpec {
            num_layers: spec.num_layers as usize,
            hidden_dim: spec.hidden_dim as usize,
            num_heads: spec.num_heads as usize,
            num_kv_heads: spec.num_kv_heads as usize,
            mlp_groups: spec.mlp_groups as usize,
            vocab_groups: spec.vocab_groups as usize,
            group_size: spec.group_size as usize,
            seed: spec.seed,
        };
        let store = init_model(spec)?;
        *out = Box::into_raw(Box::new(EdgetpModel(store)));
        Ok(())
    })
}

/// Load a model from a weight file.
///
/// # Safety
/// `file` must be a NUL-terminated string; `out` as for [`edgetp_model_init`].
#[no_mangle]
pub unsafe extern "C" fn edgetp_model_load(file: *const c_char, out: *mut *mut EdgetpModel) -> EdgetpStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(EdgetpStatus::NullPointer, "null output"));
        }
        let store = WeightStore::load(path(file)?)?;
        *out = Box::into_raw(Box::new(EdgetpModel(store)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `file` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn edgetp_model_save(model: *const EdgetpModel, file: *const c_char) -> EdgetpStatus {
    guard(|| {
        handle(model)?.0.save(path(file)?)?;
        Ok(())
    })
}

/// Vocabulary size, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn edgetp_model_vocab_size(model: *const EdgetpModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.spec().vocab_size())
}

/// Number of groups of `kind` per layer, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn edgetp_model_group_count(model: *const EdgetpModel, kind: EdgetpBlockKind) -> usize {
    model.as_ref().map_or(0, |m| m.0.spec().group_count(block_kind(kind)))
}

/// Dense forward pass over `tokens`; writes the last position's logits.
///
/// # Safety
/// `tokens` must point to `n` values and `logits` to `cap` writable floats.
#[no_mangle]
pub unsafe extern "C" fn edgetp_model_forward(
    model: *const EdgetpModel,
    tokens: *const u32,
    n: usize,
    logits: *mut f32,
    cap: usize,
) -> EdgetpStatus {
    guard(|| {
        let store = &handle(model)?.0;
        let tokens = slice(tokens, n)?;
        if tokens.is_empty() {
            return Err(fail(EdgetpStatus::InvalidArgument, "empty token sequence"));
        }
        let vocab = store.spec().vocab_size();
        if cap < vocab {
            return Err(fail(EdgetpStatus::BufferTooSmall, "logit buffer shorter than vocabulary"));
        }
        if logits.is_null() {
            return Err(fail(EdgetpStatus::NullPointer, "null logit buffer"));
        }
        let trace = dense_forward(store, tokens)?;
        let last = &trace.steps.last().expect("non-empty").logits;
        ptr::copy_nonoverlapping(last.as_ptr(), logits, vocab);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn edgetp_model_free(model: *mut EdgetpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Min-max workload ratios for `n` devices and a model of `total_mb`.
///
/// # Safety
/// `devices` must point to `n` entries and `ratios` to `n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn edgetp_min_max_ratios(
    devices: *const EdgetpDevice,
    n: usize,
    total_mb: f64,
    epsilon: f64,
    ratios: *mut f64,
) -> EdgetpStatus {
    guard(|| {
        let devices = slice(devices, n)?;
        if ratios.is_null() {
            return Err(fail(EdgetpStatus::NullPointer, "null ratio buffer"));
        }
        let r = min_max(&profiles(devices), total_mb, epsilon)?;
        ptr::copy_nonoverlapping(r.as_slice().as_ptr(), ratios, n);
        Ok(())
    })
}

/// Build a schedule for `model` on `n` devices. With `total_mb > 0` the
/// model is treated as occupying that many MB; otherwise 4 bytes per
/// parameter.
///
/// # Safety
/// `model` must come from this library, `devices` must point to `n`
/// entries and `out` to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn edgetp_schedule_build(
    model: *const EdgetpModel,
    scheduler: EdgetpScheduler,
    devices: *const EdgetpDevice,
    n: usize,
    total_mb: f64,
    out: *mut *mut EdgetpSchedule,
) -> EdgetpStatus {
    guard(|| {
        let spec = *handle(model)?.0.spec();
        let devices = slice(devices, n)?;
        if out.is_null() {
            return Err(fail(EdgetpStatus::NullPointer, "null output"));
        }
        let mut scale = CostScale::default();
        if total_mb > 0.0 {
            let unit = CostScale { mb_per_param: 1.0, ..scale };
            scale.mb_per_param = total_mb / CostModel::from_spec(&spec, unit).total_memory();
        }
        let kind = match scheduler {
            EdgetpScheduler::CompGreedy => SchedulerKind::CompGreedy,
            EdgetpScheduler::MinMax => SchedulerKind::MinMax,
            EdgetpScheduler::VanillaEven => SchedulerKind::VanillaEven,
            EdgetpScheduler::GalaxyTwoStep => SchedulerKind::GalaxyTwoStep,
        };
        let s = build_schedule(kind, &profiles(devices), &spec, &CostModel::from_spec(&spec, scale))?;
        *out = Box::into_raw(Box::new(EdgetpSchedule(s)));
        Ok(())
    })
}

/// Number of devices, or 0 for a null handle.
///
/// # Safety
/// `schedule` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn edgetp_schedule_num_devices(schedule: *const EdgetpSchedule) -> usize {
    schedule.as_ref().map_or(0, |s| s.0.num_devices())
}

/// Copy a device's 1-based priority indices for `kind` into `out`.
/// `len` receives the full count even when `cap` is too small.
///
/// # Safety
/// `out` must point to `cap` writable values and `len` to one.
#[no_mangle]
pub unsafe extern "C" fn edgetp_schedule_indices(
    schedule: *const EdgetpSchedule,
    device: usize,
    kind: EdgetpBlockKind,
    out: *mut u32,
    cap: usize,
    len: *mut usize,
) -> EdgetpStatus {
    guard(|| {
        let s = &handle(schedule)?.0;
        if len.is_null() {
            return Err(fail(EdgetpStatus::NullPointer, "null length output"));
        }
        let d = s
            .devices
            .get(device)
            .ok_or_else(|| fail(EdgetpStatus::InvalidArgument, "device index out of range"))?;
        let idx = d.indices(block_kind(kind));
        *len = idx.len();
        if cap < idx.len() {
            return Err(fail(EdgetpStatus::BufferTooSmall, "index buffer too small"));
        }
        if !idx.is_empty() && out.is_null() {
            return Err(fail(EdgetpStatus::NullPointer, "null index buffer"));
        }
        for (i, &v) in idx.iter().enumerate() {
            *out.add(i) = v as u32;
        }
        Ok(())
    })
}

/// # Safety
/// `schedule` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn edgetp_schedule_free(schedule: *mut EdgetpSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}
