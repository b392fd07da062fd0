use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A caller-supplied size, range or hyperparameter is invalid.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// A token id falls outside its vocabulary.
    #[error("token {token} outside vocabulary of size {vocab}")]
    Domain { token: u32, vocab: usize },
    /// Shapes, layouts or graph wiring do not line up.
    #[error("structural mismatch: {0}")]
    Structural(String),
    /// The KL divergence is infinite: the reference puts zero mass where the
    /// other distribution does not.
    #[error("divergence is infinite at index {index}")]
    DivergenceInfinite { index: usize },
    /// An embedding norm fell below the floor, so cosine similarity is undefined.
    #[error("degenerate embedding (norm {norm:e})")]
    DegenerateEmbedding { norm: f64 },
    /// Models or parameter vectors do not share a lineage and cannot be merged.
    #[error("merge rejected: {0}")]
    Merge(String),
    /// A non-finite loss or gradient appeared during training.
    #[error("numerical failure at step {step}: {what} (parameter norm {param_norm:e})")]
    Numerical {
        step: usize,
        what: String,
        param_norm: f64,
    },
    /// Embedding training could not form a single usable triplet.
    #[error("training failed: {0}")]
    Training(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn arg(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}

pub(crate) fn structural(msg: impl Into<String>) -> Error {
    Error::Structural(msg.into())
}
