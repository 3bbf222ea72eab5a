use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A run config or programmatic configuration is invalid. `path` names the
    /// offending field (e.g. `strategy[1].subgroup_size`).
    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("unknown {what} `{name}`")]
    UnknownPreset { what: &'static str, name: String },

    #[error("link class {0:?} is not configured in this topology")]
    UnknownLinkClass(crate::topology::LinkKind),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    /// The schedule was asked to build from a parameter state that breaks the
    /// cache protocol (e.g. a clean flag with an empty host cache).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Verification was handed a trace that does not belong to the given inputs.
    #[error("harness error: {0}")]
    Harness(String),

    /// A memory tier exceeded its capacity during simulation.
    #[error("out of memory: {0}")]
    OutOfMemory(Box<crate::simengine::OomVerdict>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
