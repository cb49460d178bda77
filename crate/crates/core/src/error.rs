//! Error types shared across the toolkit.

use thiserror::Error;

/// Errors raised by tensor construction and the autodiff engine.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value at index {index} in {context}")]
    NonFinite { context: &'static str, index: usize },

    #[error("stale tape: backward was already run on this recording")]
    StaleTape,

    #[error("backward requires a scalar loss, got {len} elements")]
    NonScalarLoss { len: usize },

    #[error("quantized value {value} outside [{qmin}, {qmax}]")]
    OutOfRange { value: i32, qmin: i32, qmax: i32 },

    #[error("invalid quantization params: {0}")]
    InvalidParams(String),

    #[error("unknown layer kind `{0}`")]
    UnknownLayerKind(String),
}

/// Errors raised while loading or saving models, parameters and datasets.
#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("unsupported format version {found} in {path} (supported: {supported})")]
    UnsupportedVersion {
        path: String,
        found: u32,
        supported: u32,
    },

    #[error("missing tensor blob `{blob}` referenced by {manifest}")]
    MissingBlob { manifest: String, blob: String },

    #[error("blob `{blob}` holds {found} bytes, expected {expected} for shape {shape:?}")]
    BlobLengthMismatch {
        blob: String,
        found: u64,
        expected: u64,
        shape: Vec<usize>,
    },

    #[error("unknown layer kind `{kind}` in {path}")]
    UnknownLayerKind { path: String, kind: String },

    #[error("duplicate layer key `{layer}` in {path}")]
    DuplicateLayer { path: String, layer: String },

    #[error("malformed index row {row} in {path}: {detail}")]
    MalformedIndexRow {
        path: String,
        row: usize,
        detail: String,
    },

    #[error("unknown strategy name `{name}` in {path}")]
    UnknownStrategy { path: String, name: String },

    #[error("label {label} out of range [0, {num_classes}) at index row {row}")]
    LabelOutOfRange {
        label: i64,
        num_classes: usize,
        row: usize,
    },

    #[error("calibration input shape {found:?} does not match declared {declared:?} (blob `{blob}`)")]
    InputShapeMismatch {
        blob: String,
        found: Vec<usize>,
        declared: Vec<usize>,
    },

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Errors raised by the calibration strategies.
#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration input for {context} is empty")]
    EmptyInput { context: &'static str },

    #[error("calibration input for {context} has no nonzero sample")]
    AllZero { context: &'static str },

    #[error("histogram bins {bins} must be >= quantization levels {levels}")]
    TooFewBins { bins: usize, levels: usize },

    #[error("every calibration output had zero norm; cosine search is degenerate")]
    DegenerateCosine,

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Errors raised by strategy search and assignment application.
#[derive(Debug, Error)]
pub enum SearchError {
    #[error("missing quantization params for layer `{layer}`, strategy `{strategy}` ({class})")]
    MissingQuantParams {
        layer: String,
        strategy: String,
        class: &'static str,
    },

    #[error("assignment is missing layer `{layer}`")]
    MissingAssignment { layer: String },

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}; per-layer theta at failure: {theta_dump}"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        theta_dump: String,
    },

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Errors raised by quantization-aware training.
#[derive(Debug, Error)]
pub enum QatError {
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss} exceeds {limit} (initial {initial}); state: {dump}")]
    Diverged {
        epoch: usize,
        step: usize,
        loss: f32,
        initial: f32,
        limit: f32,
        dump: String,
    },

    #[error("training set is empty")]
    EmptyTrainSet,

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Search(#[from] SearchError),
}
