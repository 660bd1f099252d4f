use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("ill-conditioned system: {0}")]
    IllConditioned(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("non-finite loss in {stage} epoch {epoch} batch {batch}: {report:?}")]
    NonFiniteLoss {
        stage: String,
        epoch: usize,
        batch: usize,
        report: Box<LossReport>,
    },

    #[error("split `{0}` has no records")]
    EmptySplit(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("missing transport matrix for condition {condition_id} (expected {path})")]
    MissingMatrix { condition_id: usize, path: PathBuf },

    #[error("could not read {} source image(s): {}", .0.len(), .0.iter().map(|(p, e)| format!("{}: {e}", p.display())).collect::<Vec<_>>().join("; "))]
    SourceImages(Vec<(PathBuf, String)>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Machine-parsable class name printed by the command line tool.
    pub fn class(&self) -> &'static str {
        match self {
            Self::Dimension(_) => "dimension",
            Self::Config(_) => "config",
            Self::IllConditioned(_) => "ill_conditioned",
            Self::Contract(_) => "contract",
            Self::Numeric(_) | Self::NonFiniteLoss { .. } => "numeric",
            Self::EmptySplit(_) => "empty_split",
            Self::Integrity(_) => "integrity",
            Self::Format(_) => "format",
            Self::MissingMatrix { .. } => "missing_matrix",
            Self::SourceImages(_) => "source_images",
            Self::Io { .. } => "io",
            Self::Image { .. } => "image",
            Self::Json(_) => "json",
        }
    }
}

impl From<nlos_tensor::ShapeError> for Error {
    fn from(e: nlos_tensor::ShapeError) -> Self {
        Self::Dimension(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
