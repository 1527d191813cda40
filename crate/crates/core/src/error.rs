use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("architecture graph contains a cycle")]
    Cycle,
    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: usize, detail: String },
    #[error("node {0} is not on a path from the input to the classifier head")]
    DanglingNode(usize),
    #[error("invalid architecture: {0}")]
    InvalidGraph(String),
    #[error("generated only {got} of {wanted} distinct architectures after {attempts} attempts")]
    GenerationExhausted {
        wanted: usize,
        got: usize,
        attempts: usize,
    },
    #[error("non-finite activation at node {0}")]
    NonFiniteActivation(usize),
    #[error("non-finite loss on architecture `{0}`")]
    NonFiniteLoss(String),
    #[error("fine-tuning diverged at lr {lr} (step {step})")]
    Diverged { lr: f64, step: usize },
    #[error("unsupported parameter shape {0:?}")]
    UnsupportedShape(Vec<usize>),
    #[error("rank correlation undefined: one input has all values tied")]
    AllTied,
    #[error("tensor has zero norm")]
    DegenerateTensor,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// True for failures caused by numerics rather than inputs or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteActivation(_) | Error::NonFiniteLoss(_) | Error::Diverged { .. }
        )
    }
}
