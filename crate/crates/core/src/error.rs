//! Error types shared across the engine and simulation layers.

use thiserror::Error;

/// Errors raised by tensor and network operations.
#[derive(Debug, Error)]
pub enum EngineError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite values encountered in {0}")]
    NonFinite(String),
    #[error("trace does not match network: {0}")]
    TraceMismatch(String),
    #[error("{0}")]
    Invalid(String),
}

impl EngineError {
    pub fn shape(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        EngineError::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}

/// Errors raised by model construction, sampling and checkpointing.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown architecture template '{0}'")]
    UnknownTemplate(String),
    #[error("class count {q} exceeds generator noise dimension {noise_dim}")]
    NoisePrefixTooLarge { q: usize, noise_dim: usize },
    #[error("label {label} out of range for {q} classes")]
    LabelOutOfRange { label: usize, q: usize },
    #[error("feature dimension mismatch: current {current}, frozen {frozen}")]
    FeatureDimMismatch { current: usize, frozen: usize },
    #[error("model has no BatchNorm layer; statistics loss undefined")]
    NoBatchNorm,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Errors raised while loading or generating datasets.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad IDX magic in {path}: expected {expected:#010x}, got {got:#010x}")]
    MagicMismatch {
        path: String,
        expected: u32,
        got: u32,
    },
    #[error("truncated IDX payload in {path}: expected {expected} bytes, got {got}")]
    TruncatedPayload {
        path: String,
        expected: usize,
        got: usize,
    },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("labels are not dense in [0, {num_classes}): class {missing} has no sample")]
    SparseLabels { num_classes: usize, missing: usize },
    #[error("{num_classes} classes not divisible into {tasks} tasks")]
    TaskSplitNotDivisible { num_classes: usize, tasks: usize },
    #[error("class {class} has no test sample")]
    EmptyTestClass { class: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Errors raised by checkpoint serialization.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("checkpoint format version mismatch: file has {found}, this build reads {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Errors raised by the federated orchestration.
#[derive(Debug, Error)]
pub enum FederationError {
    #[error("cannot select {k} clients out of {n}")]
    SelectionTooLarge { k: usize, n: usize },
    #[error("all client updates carried zero samples")]
    AllUpdatesEmpty,
    #[error("no updates to aggregate")]
    NoUpdates,
    #[error("task {task}, round {round}: {source}")]
    AtRound {
        task: usize,
        round: usize,
        #[source]
        source: Box<FederationError>,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Errors raised by metric bookkeeping and report export.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty test set for task {0}")]
    EmptyTestSet(usize),
    #[error("missing end-of-task checkpoint for task {0}")]
    MissingCheckpoint(usize),
    #[error("average forgetting undefined for a single task")]
    SingleTask,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed report: {0}")]
    Malformed(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Errors raised while resolving run configuration.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to parse config: {0}")]
    Parse(String),
    #[error("invalid value for '{key}': {reason}")]
    InvalidValue { key: String, reason: String },
    #[error("'{a}' ({a_value}) conflicts with '{b}' ({b_value}): {reason}")]
    Conflict {
        a: String,
        a_value: String,
        b: String,
        b_value: String,
        reason: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
