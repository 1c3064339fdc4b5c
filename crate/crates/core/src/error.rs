use std::path::PathBuf;

use crate::fault::FaultSite;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid shape {0:?}: every extent must be >= 1")]
    InvalidShape(Vec<usize>),

    #[error("data length {len} does not match shape {shape:?} ({expected} elements)")]
    LengthMismatch {
        len: usize,
        shape: Vec<usize>,
        expected: usize,
    },

    #[error("empty tensor")]
    EmptyTensor,

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f32 },

    #[error("value {value} at index {index} outside the {width}-bit signed range")]
    OutOfRange { index: usize, value: i64, width: u32 },

    #[error("unsupported bit width {0} (expected 8 or 32)")]
    BitWidth(u32),

    #[error("invalid scale {0}: must be positive and finite")]
    InvalidScale(f32),

    #[error("observer is frozen")]
    ObserverFrozen,

    #[error("observer has no range (ema_absmax = 0)")]
    ZeroRange,

    #[error("bit index {bit} out of range for {width}-bit value")]
    BitIndex { bit: u32, width: u32 },

    #[error("element index {index} out of range for tensor of {len} elements")]
    ElementIndex { index: usize, len: usize },

    #[error("requested {requested} faults but the population holds only {available} bits")]
    TooManyFaults { requested: u64, available: u64 },

    #[error("bit budget is empty")]
    EmptyBudget,

    #[error("fault target addresses layer {layer} but the model has {layers} layers")]
    DanglingTarget { layer: usize, layers: usize },

    #[error("fault target addresses layer {layer} ({kind}) which has no fault sites")]
    NotQuantized { layer: usize, kind: &'static str },

    #[error("fault target {site} element {element} out of range for layer {layer} ({len} elements)")]
    TargetOutOfRange {
        layer: usize,
        site: FaultSite,
        element: usize,
        len: usize,
    },

    #[error("expected {expected} fault plans for the batch, got {got}")]
    PlanCount { expected: usize, got: usize },

    #[error("unknown fault site `{0}`")]
    UnknownSite(String),

    #[error("max pooling needs even spatial extents, got {h}x{w}")]
    OddPooling { h: usize, w: usize },

    #[error("backward pass called without a training trace")]
    MissingTrace,

    #[error("label {label} out of range 0..{classes}")]
    LabelRange { label: usize, classes: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: bad magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: file truncated ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("{path}: unexpected image dimensions {rows}x{cols} (expected 28x28)")]
    Dimensions { path: PathBuf, rows: u32, cols: u32 },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("csv line {line}: {detail}")]
    CsvRow { line: u64, detail: String },

    #[error("need at least 2 values for a confidence interval, got {0}")]
    TooFewRepeats(usize),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Bad or missing input files, as opposed to failures while computing.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::Truncated { .. }
                | Error::Dimensions { .. }
                | Error::CountMismatch { .. }
                | Error::LabelRange { .. }
                | Error::Checkpoint(_)
                | Error::CheckpointVersion { .. }
                | Error::CsvRow { .. }
                | Error::Io { .. }
                | Error::Csv(_)
        )
    }
}
