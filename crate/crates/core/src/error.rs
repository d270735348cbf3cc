use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("index out of range: {what} {index} >= {bound}")]
    OutOfBounds {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid debiasing weight {value} ({what})")]
    InvalidWeight { what: &'static str, value: f64 },
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("propensity estimation failed: {0}")]
    Estimation(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}
