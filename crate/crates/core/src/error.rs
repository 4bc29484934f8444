use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A loss value fed to a detector or scheduler was NaN or infinite.
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: u64, value: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("missing required key `{0}`")]
    MissingKey(&'static str),

    /// Schedulers are stepped strictly in order; skipping or repeating an index is refused.
    #[error("out-of-order step: expected iteration {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },

    #[error("contraction violated: decay_gain * lr = {product} (must be < 1)")]
    Contraction { product: f64 },

    #[error("empty trace")]
    EmptyTrace,

    #[error("{msg} at line {line}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    /// True for failures of the underlying reader or writer, as opposed to bad content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
