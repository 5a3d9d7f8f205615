use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates one of its invariants.
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("failed to parse scenario: {0}")]
    Parse(String),

    /// An argument outside the domain of a model function.
    #[error("{what} out of domain: {value}")]
    Domain { what: &'static str, value: f64 },

    /// Non-positive bumper-to-bumper gap in the ground-truth simulation.
    #[error("collision at t={time_s:.2}s: vehicle {follower} behind {leader}, gap {gap:.4} m")]
    SimulationFault {
        time_s: f64,
        leader: u64,
        follower: u64,
        gap: f64,
    },

    #[error("filter fault: {0}")]
    FilterFault(String),

    #[error("runs cannot be paired: {0}")]
    Pairing(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Parse(_) | Error::Domain { .. } => 2,
            Error::SimulationFault { .. } => 3,
            Error::FilterFault(_) => 4,
            _ => 1,
        }
    }
}
