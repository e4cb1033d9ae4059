use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("workspace generation failed after {attempts} attempts")]
    GenerationFailed { attempts: usize },
    #[error("grid resolution {0} maps start and goal to the same cell")]
    ResolutionTooCoarse(usize),
    #[error("start or goal configuration is in collision")]
    InvalidStart,
    #[error("no solution found within {0} iterations")]
    NoSolutionFound(u64),
    #[error("degenerate profile: worst length {worst} <= optimal length {optimal}")]
    DegenerateProfile { worst: f64, optimal: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("missing input: {0}")]
    MissingInput(&'static str),
    #[error("state out of range: {0}")]
    StateOutOfRange(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable tag used in machine-readable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "InvalidInput",
            Error::GenerationFailed { .. } => "GenerationFailed",
            Error::ResolutionTooCoarse(_) => "ResolutionTooCoarse",
            Error::InvalidStart => "InvalidStart",
            Error::NoSolutionFound(_) => "NoSolutionFound",
            Error::DegenerateProfile { .. } => "DegenerateProfile",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::Diverged { .. } => "Diverged",
            Error::EmptyDataset => "EmptyDataset",
            Error::MissingInput(_) => "MissingInput",
            Error::StateOutOfRange(_) => "StateOutOfRange",
            Error::InsufficientData(_) => "InsufficientData",
            Error::Parse(_) => "Parse",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}
