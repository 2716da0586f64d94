use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid fixed-point format: n={n}, m={m} ({reason})")]
    InvalidFormat { n: u32, m: u32, reason: &'static str },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("innovation covariance is singular at step {step}")]
    SingularInnovation { step: usize },

    #[error("invalid energy vector: {0}")]
    InvalidEnergy(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
}

impl Error {
    pub(crate) fn dims(context: &'static str, expected: (usize, usize), actual: (usize, usize)) -> Self {
        Error::DimensionMismatch {
            context,
            expected: format!("{}x{}", expected.0, expected.1),
            actual: format!("{}x{}", actual.0, actual.1),
        }
    }
}
