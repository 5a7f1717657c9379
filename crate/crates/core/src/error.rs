use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite or out-of-domain value: {0}")]
    Numeric(String),
    #[error("column {index} has near-zero norm ({norm:e})")]
    DegenerateColumn { index: usize, norm: f64 },
    #[error("encoder produced a degenerate feature (norm {norm:e})")]
    DegenerateFeature { norm: f64 },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("invalid prompt template {template:?}: {reason}")]
    Template { template: String, reason: String },
    #[error("invalid class name set: {0}")]
    ClassNames(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("world generation failed: {0}")]
    WorldGeneration(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("contrastive loss needs at least 2 pairs per batch, got {0}")]
    ContrastiveBatch(usize),
    #[error("pre-trained model failed the quality gate after {attempts} seeds: {detail}")]
    PretrainQuality { attempts: usize, detail: String },
    #[error("training diverged at step {step}: {detail}")]
    TrainingDiverged { step: usize, detail: String },
    #[error("checkpoints are not ensemble-compatible: {0}")]
    EnsembleCompatibility(String),
    #[error("soup needs at least one candidate")]
    EmptySoup,
    #[error("context probe needs one template per context: {templates} templates, {contexts} contexts")]
    ProbeAlignment { templates: usize, contexts: usize },
    #[error("duplicate report key {0}")]
    DuplicateKey(String),
    #[error("alpha = {alpha}: {source}")]
    Sweep {
        alpha: f64,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failures specific to reading checkpoint files.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic header")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected 1)")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor {name} has shape {rows}x{cols}, which does not fit the model")]
    ShapeMismatch { name: String, rows: u64, cols: u64 },
    #[error("tensor {0} is missing")]
    MissingTensor(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used by the command-line driver for exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_)
            | Error::Template { .. }
            | Error::ClassNames(_)
            | Error::Precondition(_)
            | Error::Range(_)
            | Error::ProbeAlignment { .. }
            | Error::EnsembleCompatibility(_)
            | Error::EmptySoup => ErrorKind::Config,
            Error::EmptyDataset
            | Error::Parse { .. }
            | Error::Checkpoint(_)
            | Error::Io { .. }
            | Error::DuplicateKey(_) => ErrorKind::Data,
            Error::Sweep { source, .. } => source.kind(),
            _ => ErrorKind::Numeric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}
