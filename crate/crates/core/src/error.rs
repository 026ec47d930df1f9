use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate conditioning slice for agent {owner}: local state {local_state}, action {action} has zero mass")]
    DegenerateSlice {
        owner: usize,
        local_state: usize,
        action: usize,
    },

    #[error("value {value} outside [0, {v_max}]")]
    OutOfRange { value: f64, v_max: f64 },

    #[error("concentrability is unbounded: data distribution has zero mass at index {0}")]
    UnboundedConcentrability(usize),

    #[error("table too large: {entries} entries exceeds the cap of {cap}")]
    TooLarge { entries: usize, cap: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("digest mismatch for {0}")]
    Digest(PathBuf),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("episode {episode}, step {step}: {source}")]
    Step {
        episode: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("agent {agent}, iteration {iteration}: {source}")]
    Fit {
        agent: usize,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("d={d}, mode={mode}, seed={seed}, {stage}: {source}")]
    Cell {
        d: usize,
        mode: String,
        seed: u64,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
