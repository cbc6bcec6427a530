use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value in input to {0}")]
    NonFinite(&'static str),
    #[error("convolution kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error("channel mismatch: input has {input} channels, kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error("operation {0} has no registered gradient")]
    NoGradient(&'static str),
    #[error("{op} requires FP32 operands, got {found:?}")]
    Precision {
        op: &'static str,
        found: crate::tensor::Precision,
    },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("segment id {0} is not 0 or 1")]
    SegmentOutOfRange(usize),
    #[error("expected sequence length {expected}, got {found}")]
    SequenceLength { expected: usize, found: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("lambda weights are already frozen")]
    AlreadyFrozen,
    #[error("fp8 encode requires |x| <= 6, got {0}")]
    Fp8Range(f32),
    #[error("missing parameter `{param}` for layer kind {kind}")]
    MissingParameter { kind: &'static str, param: &'static str },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("empty search space: {0}")]
    EmptySearchSpace(String),
    #[error("no candidates to select from")]
    EmptyCandidates,
    #[error("target vocabulary size {target} is too small (minimum {minimum})")]
    VocabTooSmall { target: usize, minimum: usize },
    #[error("dataset too small: {0} records (need at least 10)")]
    DatasetTooSmall(usize),
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
