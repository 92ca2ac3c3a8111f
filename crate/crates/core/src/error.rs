use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rank {rank} does not own block ({row}, {col}); owner is rank {owner}")]
    Ownership { rank: usize, row: usize, col: usize, owner: usize },

    #[error("unsupported grid: {0}")]
    UnsupportedGrid(String),

    #[error("deadlock: ranks {blocked:?} are blocked in recv with no matching message")]
    Deadlock { blocked: Vec<usize> },

    #[error("incompatible layout on {dimension}: {detail}")]
    Layout { dimension: &'static str, detail: String },

    #[error("rank worker {0} panicked")]
    WorkerPanic(usize),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
