use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DashError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DashError {
    #[error("{op}: shape mismatch {shapes}")]
    Shape { op: &'static str, shapes: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("sequence length {len} exceeds model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("freeze violation: parameter `{0}` received a non-zero gradient during architecture search")]
    FreezeViolation(String),

    #[error("routing probabilities sum to {0}, expected 1")]
    ProbsNotNormalized(f64),

    #[error("final distillation requires a discrete architecture; got a soft mixture")]
    SoftArchitecture,

    #[error("budget {budget} out of range 1..={layers}")]
    BudgetOutOfRange { budget: usize, layers: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("checkpoint version mismatch: file has version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("empty report: no records to emit")]
    EmptyReport,
}

impl DashError {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        let shapes = shapes.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(" vs ");
        DashError::Shape { op, shapes }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DashError::Io {
            path: path.into(),
            source,
        }
    }
}
