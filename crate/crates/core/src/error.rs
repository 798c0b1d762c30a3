use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid world parameters: {0}")]
    WorldParams(String),

    #[error("node {0} is not in the navigation graph")]
    UnknownNode(usize),

    #[error("node {to} is unreachable from node {from}")]
    Unreachable { from: usize, to: usize },

    #[error("unknown object id {0}")]
    UnknownObject(usize),

    #[error("graph too small: {0}")]
    GraphTooSmall(String),

    #[error("trajectory is not a valid walk: {0}")]
    InvalidTrajectory(String),

    #[error("empty instruction")]
    EmptyInstruction,

    #[error("malformed observation: {0}")]
    MalformedObservation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("episode {episode} does not pass through the attack viewpoint {node}")]
    MissingAttackViewpoint { episode: u64, node: usize },

    #[error("empty path")]
    EmptyPath,

    #[error("empty validation split")]
    EmptyValidation,

    #[error("misaligned inputs: {0}")]
    Misaligned(String),

    #[error("{key}: {message}")]
    Config { key: String, message: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("config hash mismatch in {path}: artifact has {found}, current config is {expected}")]
    HashMismatch {
        path: String,
        found: String,
        expected: String,
    },

    #[error("corrupt artifact {path}: {message}")]
    Corrupt { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
