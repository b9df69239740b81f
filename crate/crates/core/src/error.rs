use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("infeasible intention: {0}")]
    InfeasibleIntention(String),

    #[error("format error at offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training error in epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    #[error("protocol error: field `{field}`: {reason}")]
    Protocol { field: String, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format { offset, reason: reason.into() }
    }

    pub fn protocol(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Protocol { field: field.into(), reason: reason.into() }
    }
}
