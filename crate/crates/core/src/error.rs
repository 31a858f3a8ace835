use thiserror::Error;

/// All recoverable failures surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A caller violated an API contract (non-scalar backward root, empty
    /// n-best list, empty reference, ...).
    #[error("contract error: {0}")]
    Contract(String),
    /// Invalid configuration value or unknown key.
    #[error("config error: {0}")]
    Config(String),
    /// The label sequence cannot be aligned within the available frames.
    #[error("ctc infeasible: {labels} labels (with {repeats} repeats) need at least {min_frames} frames, got {frames}")]
    CtcInfeasible {
        labels: usize,
        repeats: usize,
        min_frames: usize,
        frames: usize,
    },
    /// Checkpoint file is malformed, truncated or of the wrong version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Training diverged (non-finite loss).
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
