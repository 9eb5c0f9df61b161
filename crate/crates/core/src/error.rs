use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("epicardium exceeds the field of view: {0}")]
    GeometryOverflow(String),
    #[error("failed to write dataset at {path}: {source}")]
    DatasetWrite { path: PathBuf, source: std::io::Error },
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
    #[error("ambiguous phase curve: argmax at frame {argmax}, argmin at frame {argmin}")]
    AmbiguousPhase { argmax: usize, argmin: usize },
    #[error("degenerate target scaler: index {index} has max == min")]
    DegenerateScaler { index: usize },
    #[error("need {needed} patients for a batch, have {available}")]
    InsufficientPatients { needed: usize, available: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported layer: {0}")]
    UnsupportedLayer(String),
    #[error("decoder channel underflow: {0}")]
    ChannelUnderflow(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("too few non-zero pairs for the signed-rank test: {0} < 6")]
    TooFewPairs(usize),
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("{0} ensemble candidates exceed the limit of 20")]
    CandidateOverflow(usize),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("experiment file: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] lvq_nn::NnError),
}

impl Error {
    /// Stable machine-readable class name.
    pub fn class(&self) -> &'static str {
        match self {
            Error::GeometryOverflow(_) => "GeometryOverflow",
            Error::DatasetWrite { .. } => "DatasetWriteError",
            Error::DegenerateMask(_) => "DegenerateMask",
            Error::AmbiguousPhase { .. } => "AmbiguousPhase",
            Error::DegenerateScaler { .. } => "DegenerateScaler",
            Error::InsufficientPatients { .. } => "InsufficientPatients",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::UnsupportedLayer(_) => "UnsupportedLayer",
            Error::ChannelUnderflow(_) => "ChannelUnderflow",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::TooFewPairs(_) => "TooFewPairs",
            Error::UndefinedCorrelation(_) => "UndefinedCorrelation",
            Error::CandidateOverflow(_) => "CandidateOverflow",
            Error::MissingCheckpoint(_) => "MissingCheckpoint",
            Error::Invalid(_) => "InvalidInput",
            Error::Io { .. } => "IoError",
            Error::Json(_) => "JsonError",
            Error::Csv(_) => "CsvError",
            Error::Config(_) => "ConfigError",
            Error::Nn(_) => "ShapeMismatch",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
