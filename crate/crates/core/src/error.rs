//! Crate-wide error type. Variants are deliberately fine-grained so callers
//! and tests can distinguish failure kinds without string matching.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ── tensor engine ──
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a 2-d operand, got shape {shape:?}")]
    NotTwoDimensional { op: &'static str, shape: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("column slice {start}..{end} invalid for {cols} columns")]
    InvalidSlice { start: usize, end: usize, cols: usize },
    #[error("log of non-positive value {value}")]
    LogDomain { value: f64 },
    #[error("backward requires a scalar loss, got {len} elements")]
    NonScalarLoss { len: usize },
    #[error("backward already ran on this tape")]
    BackwardConsumed,
    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    // ── optimizer ──
    #[error("non-finite gradient for parameter '{param}' at step {step}")]
    NonFiniteGrad { param: String, step: u64 },
    #[error("optimizer state holds {state} slots but {params} parameters were given")]
    OptimizerStateMismatch { state: usize, params: usize },

    // ── model ──
    #[error("unknown activation tap '{name}'")]
    UnknownTap { name: String },
    #[error("input width {actual} does not match encoder input dim {expected}")]
    InputWidthMismatch { expected: usize, actual: usize },
    #[error("head expansion must add at least one class")]
    EmptyExpansion,
    #[error("model has no classifier head yet")]
    NoHead,

    // ── checkpoint container ──
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt header: {reason}")]
    CorruptHeader { reason: String },
    #[error("shape table error: {reason}")]
    ShapeTable { reason: String },
    #[error("truncated payload: wanted {expected} more bytes, {actual} left")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("container is missing tensor '{name}'")]
    MissingTensor { name: String },
    #[error("checkpoint does not describe a valid model: {reason}")]
    CheckpointStructure { reason: String },

    // ── losses ──
    #[error("label {label} outside valid range 0..{limit}")]
    LabelOutOfRange { label: usize, limit: usize },
    #[error("class scope {start}..{end} invalid for {width} logit columns")]
    InvalidScope { start: usize, end: usize, width: usize },
    #[error("balanced binary cross-entropy needs at least 2 classes in scope, got {classes}")]
    ScopeTooSmall { classes: usize },
    #[error("distillation operands cover different class counts: {left} vs {right}")]
    ClassRangeMismatch { left: usize, right: usize },
    #[error("fisher entry for '{param}' has wrong shape")]
    FisherShape { param: String },
    #[error("checkpoint has no fisher information attached")]
    MissingFisher,
    #[error("fisher entry for '{param}' is negative ({value})")]
    NegativeFisher { param: String, value: f64 },
    #[error("anchor parameter '{param}' does not match the live model")]
    AnchorMismatch { param: String },
    #[error("loss term '{term}' is not finite")]
    NonFiniteLossTerm { term: String },

    // ── data ──
    #[error("invalid argument: {what}")]
    InvalidArgument { what: String },
    #[error("task split needs {need} classes but dataset has {have}")]
    SplitInfeasible { need: usize, have: usize },
    #[error("auxiliary split leaves {classes} classes on the {side} side; need at least 2")]
    AuxSplitTooSmall { side: &'static str, classes: usize },
    #[error("{path}: file size {actual} is not a multiple of the {record} byte record length (offset of partial record: {offset})")]
    DatasetSize {
        path: String,
        record: usize,
        actual: u64,
        offset: u64,
    },
    #[error("{path}: label byte {value} at offset {offset} exceeds maximum {max}")]
    DatasetLabel {
        path: String,
        offset: u64,
        value: u8,
        max: u8,
    },

    // ── trainer ──
    #[error("task {task}: {source}")]
    TaskFailure {
        task: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("non-finite loss at task {task}, epoch {epoch}, step {step}")]
    NonFiniteLoss { task: usize, epoch: usize, step: usize },
    #[error("rehearsal violation: task {task} batch contains class {class} from another task")]
    RehearsalViolation { task: usize, class: usize },
    #[error("checkpoint for task {task} was frozen after training started")]
    CheckpointCausality { task: usize },
    #[error("invalid schedule: {reason}")]
    InvalidSchedule { reason: String },

    // ── metrics ──
    #[error("{metric} undefined for {tasks} task(s); need at least 2")]
    MetricUndefined { metric: &'static str, tasks: usize },
    #[error("accuracy matrix row {row} is missing entry for task {task}")]
    MatrixIncomplete { row: usize, task: usize },
    #[error("malformed accuracy table: {reason}")]
    MatrixFormat { reason: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    // ── cka ──
    #[error("activations for tap '{tap}' have zero variance after centering")]
    ZeroVariance { tap: String },
    #[error("activation matrices disagree on example count: {left} vs {right}")]
    RowCountMismatch { left: usize, right: usize },
    #[error("similarity needs at least 2 probe examples, got {rows}")]
    TooFewRows { rows: usize },
}

impl Error {
    /// Wraps an error with the task index it occurred in.
    pub fn in_task(self, task: usize) -> Error {
        Error::TaskFailure {
            task,
            source: Box::new(self),
        }
    }
}
