use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurveError {
    #[error("normalized day {0} outside [0, 1]")]
    DayOutOfRange(f64),
    #[error("raw parameter {index} is not finite ({value})")]
    NonFiniteRaw { index: usize, value: f64 },
    #[error("expected 18 raw outputs, got {0}")]
    RawLength(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("empty pixel corpus")]
    EmptyCorpus,
    #[error("feature `{0}` is missing for every pixel")]
    AllMissing(&'static str),
    #[error("expected {expected} continuous features, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("{what} index {index} out of bounds for {len} rows")]
    IndexOutOfBounds { what: &'static str, index: usize, len: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("network output for pixel {pixel_id} is not finite")]
    NonFiniteOutput { pixel_id: u64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("pixel {0} in the batch has no prediction")]
    MissingPrediction(usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite gradient at optimizer step {step} in tensor `{tensor}`")]
    NonFiniteGradient { step: usize, tensor: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset has no pixels")]
    EmptyDataset,
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("cannot fit a baseline on zero observations")]
    Empty,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empty evaluation set")]
    Empty,
    #[error("{what} has {got} entries, expected {expected}")]
    Misaligned { what: &'static str, expected: usize, got: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic configuration: {0}")]
    Config(String),
}

/// Errors from reading and writing the columnar and JSON file formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing column `{column}` in {path}")]
    MissingColumn { path: String, column: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("schema version mismatch: file has {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnomalyError {
    #[error("{0} pixel set is empty")]
    EmptyPixelSet(&'static str),
    #[error("pixel {0} has no curves")]
    MissingCurves(u64),
}
