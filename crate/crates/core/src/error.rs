use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// Every candidate received zero likelihood.
    #[error("degenerate belief: all candidates have zero likelihood after {turns} turns")]
    DegenerateBelief { turns: usize },

    #[error("round {round} is outside the expert schedule (1..={len})")]
    Schedule { round: usize, len: usize },

    #[error("episode complete: round {round} exceeds horizon {horizon}")]
    EpisodeComplete { round: usize, horizon: usize },

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
