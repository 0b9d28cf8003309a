use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument is outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Two inputs that must describe the same entity do not.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("out of turn: {0}")]
    Sequencing(String),

    #[error("not authorized: {0}")]
    Authorization(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    /// A statistic has no defined value on the given data (e.g. zero positives).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("incomplete input: {0}")]
    Incomplete(String),

    #[error("unknown session: {0}")]
    UnknownSession(String),

    #[error("event log: {0}")]
    EventLog(String),
}

impl Error {
    /// Short machine-readable code, used in service error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Degenerate(_) => "degenerate",
            Error::Contract(_) => "contract",
            Error::Conflict(_) => "conflict",
            Error::Sequencing(_) => "sequencing",
            Error::Authorization(_) => "authorization",
            Error::Protocol(_) => "protocol",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Incomplete(_) => "incomplete",
            Error::UnknownSession(_) => "unknown_session",
            Error::EventLog(_) => "event_log",
        }
    }
}

pub(crate) fn check_unit(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {value} is outside [0, 1]")))
    }
}
