use std::path::PathBuf;

/// Crate-wide error type. Variant names follow the pipeline's contracts so
/// callers can match on the exact failure class.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    // ingest
    #[error("no HER2 label token in filename {0:?}")]
    NoLabelToken(String),
    #[error("label pattern matched {1} times in filename {0:?}")]
    AmbiguousLabel(String, usize),
    #[error("no parseable images under {0}")]
    EmptyDataset(PathBuf),
    #[error("manifest already carries predefined splits (use force to overwrite)")]
    AlreadySplit,
    #[error("invalid train fraction {0} (must be in (0,1))")]
    InvalidFraction(f64),
    #[error("malformed manifest file: {0}")]
    MalformedManifest(String),

    // preprocess
    #[error("image decode failed for {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("tensor already normalized")]
    WrongRangeTag,
    #[error("split {0:?} has no records")]
    EmptySplit(String),

    // numerics / model
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: backbone feature dim {backbone} vs head input {head}")]
    DimMismatch { backbone: usize, head: usize },
    #[error("invalid head input dim {0}")]
    InvalidDim(usize),
    #[error("pretrained weights unavailable for backbone {0:?}")]
    MissingWeights(String),
    #[error("non-finite gradient in block {0:?}")]
    NonFiniteGradient(String),

    // checkpoints
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint topology {found:?} does not match head {expected:?}")]
    TopologyMismatch { expected: Vec<usize>, found: Vec<usize> },

    // trainer
    #[error("non-finite loss at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("feature store has no entry for sample {0:?}")]
    MissingFeature(String),

    // reporting
    #[error("prediction/label length mismatch ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("category index {0} out of range [0,3]")]
    IndexOutOfRange(usize),
    #[error("empty history")]
    EmptyHistory,
    #[error("no comparison rows to render")]
    EmptyComparison,
    #[error("figure rendering failed: {0}")]
    Figure(String),

    // config / cli
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for config key {key:?}: {value:?}")]
    BadConfigValue { key: String, value: String },
    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
