use crate::model::BlockKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model dimensions: {0}")]
    Dimension(String),

    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("group {group} of {kind:?} in layer {layer} is not resident")]
    LoadMiss {
        layer: usize,
        kind: BlockKind,
        group: usize,
    },

    #[error("group id {group} out of range for {kind:?} (count {count})")]
    GroupOutOfRange {
        kind: BlockKind,
        group: usize,
        count: usize,
    },

    #[error("duplicate partial for group {0}")]
    DuplicatePartial(usize),

    #[error("partials carry mixed layer/block tags")]
    MixedPartials,

    #[error("LM head chunk {0} missing; logits require every chunk")]
    MissingLogitChunk(usize),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("total memory {available} MB below model demand {required} MB")]
    InsufficientMemory { available: f64, required: f64 },

    #[error("device {device} out of memory: needs {required:.1} MB, budget {budget:.1} MB")]
    OutOfMemory {
        device: usize,
        required: f64,
        budget: f64,
    },

    #[error("infeasible assignment: {0}")]
    Infeasible(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("instance too large for exhaustive search: {0}")]
    InstanceTooLarge(String),

    #[error("layer {0} has no predictor")]
    NoPredictor(usize),

    #[error("no training samples")]
    EmptySamples,

    #[error("reliable delivery from {from} to {to} failed after {retries} retries")]
    DeliveryFailure { from: usize, to: usize, retries: u32 },

    #[error("cannot schedule event at {at} before current time {now}")]
    EventInPast { at: f64, now: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("scenario constraints unsatisfiable: {0}")]
    Unsatisfiable(String),
}
