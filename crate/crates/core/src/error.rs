use thiserror::Error;

/// Errors raised by the tile kernels, the ring simulator and the memory tracker.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: usize,
        right: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("protocol error in round {round} at worker {worker}: {detail}")]
    Protocol {
        round: usize,
        worker: usize,
        detail: String,
    },

    #[error("state error: {0}")]
    State(String),

    #[error("memory tracker misuse: {0}")]
    Usage(String),

    #[error(
        "out of memory: requesting {requested} bytes with {live} live exceeds the {ceiling}-byte \
         ceiling; try a smaller batch size"
    )]
    OutOfMemory {
        requested: u64,
        live: u64,
        ceiling: u64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed feature file: {0}")]
    Format(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_same(op: &'static str, left: usize, right: usize) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(Error::Shape { op, left, right })
    }
}
