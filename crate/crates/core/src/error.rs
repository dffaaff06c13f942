use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An invalid hyperparameter or parameter layout.
    #[error("configuration error: {0}")]
    Config(String),

    /// A value outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-deterministic function: {0}")]
    Determinism(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at iteration {iteration} (lr {lr:e}, max |grad| {max_grad:e})")]
    NonFinite {
        iteration: usize,
        lr: f64,
        max_grad: f64,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
