use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration field failed validation; `field` is a dotted path.
    #[error("invalid {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("chip index {index} out of range (chip count {count})")]
    ChipOutOfRange { index: usize, count: usize },

    #[error("layer index {index} out of range (layer count {count})")]
    LayerOutOfRange { index: usize, count: usize },

    #[error("length mismatch for {what}: expected {expected}, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("value {value} outside the domain [0, 1]")]
    Domain { value: f64 },

    /// Every trellis state has zero likelihood at some chip.
    #[error("degenerate likelihood at chip {chip}")]
    DegenerateLikelihood { chip: usize },

    #[error("count-space budget exceeded: {0}")]
    Budget(String),

    #[error("infeasible rate floor {floor}: best achievable is {max_achievable}")]
    Infeasible { floor: f64, max_achievable: f64 },

    #[error("bad initial rates: {0}")]
    BadInit(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors that stem from user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig { .. }
                | Error::LengthMismatch { .. }
                | Error::Domain { .. }
                | Error::Parse(_)
                | Error::ChipOutOfRange { .. }
                | Error::LayerOutOfRange { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
