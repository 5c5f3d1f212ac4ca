//! Loss-tolerant tensor-parallel inference for small transformer models on
//! heterogeneous edge devices.
//!
//! The crate is organised around the path a request takes:
//!
//! * [`model`]: a toy decoder-only transformer split into independently
//!   computable neuron groups, stored in the indexed `HALM` weight format.
//! * [`sap`]: small regressors that rank the next layer's neuron groups by
//!   predicted activation norm.
//! * [`scheduler`]: workload ratios (computation-greedy, min-max) and the
//!   PLR-aware mapping of priority indices onto devices.
//! * [`transport`]: a deterministic discrete-event network with lossy
//!   datagrams, a retransmitting reliable channel and timeout-gated gathers.
//! * [`runtime`]: the distributed generation engine that ties the above
//!   together and models the Load/Comp and Pred/Comm overlap.
//! * [`harness`]: scenario generation, baselines and experiment matrices.

pub mod error;
pub mod harness;
pub mod model;
pub mod runtime;
pub mod sap;
pub mod scheduler;
pub mod transport;

pub use error::{Error, Result};
