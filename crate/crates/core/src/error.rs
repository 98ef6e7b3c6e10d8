use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: malformed record: {msg}")]
    MalformedRecord { line: usize, msg: String },

    #[error("line {line}: dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: String,
        found: String,
    },

    #[error("line {line}: negative token count {value} at R[{row}][{col}]")]
    NegativeCount {
        line: usize,
        row: usize,
        col: usize,
        value: String,
    },

    #[error("line {line}: duplicate record for iter {iter}, layer {layer}")]
    DuplicateRecord { line: usize, iter: u32, layer: u32 },

    #[error("device index {index} out of range for {n_devices} devices")]
    DeviceOutOfRange { index: usize, n_devices: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("infeasible shape: {0}")]
    Infeasible(String),

    #[error("expert {expert} has {tokens} routed tokens but no replica")]
    UnhostedExpert { expert: usize, tokens: u64 },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("volume ratio undefined for p_fsdp = 1")]
    UndefinedRatio,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("enumeration bounds exceeded: {0}")]
    BoundsExceeded(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
