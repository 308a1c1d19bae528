//! Error types for the hiercast crates.

use thiserror::Error;

/// Errors raised while building or validating a hierarchy.
#[derive(Debug, Clone, Error)]
pub enum HierarchyError {
    /// The edge list contains a cycle.
    #[error("cycle detected involving node {0}")]
    Cycle(usize),
    /// Some node is not reachable from the root.
    #[error("node {0} is not reachable from the root")]
    Disconnected(usize),
    /// A node appears as a child of more than one parent.
    #[error("node {0} has multiple parents")]
    MultiParent(usize),
    /// An aggregation weight is zero or non-finite.
    #[error("edge ({parent},{child}) has invalid weight {weight}")]
    ZeroWeight {
        parent: usize,
        child: usize,
        weight: f64,
    },
    /// Node ids must be contiguous integers 1..=N with root 1.
    #[error("node ids are not contiguous 1..={n}: saw id {id}")]
    NonContiguousIds { id: usize, n: usize },
    /// Empty edge list.
    #[error("edge list is empty")]
    EmptyEdges,
    /// A leaf value is missing for bottom-up aggregation.
    #[error("missing value for leaf node {0}")]
    MissingLeaf(usize),
    /// Panel dimensions do not match the hierarchy.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Errors raised by panel loading, preprocessing, and window construction.
#[derive(Debug, Clone, Error)]
pub enum DataError {
    /// A row references a node id absent from the hierarchy.
    #[error("unknown node id {0:?}")]
    UnknownNode(String),
    /// Time indices must be non-negative and within range.
    #[error("non-monotone or out-of-range time index {0}")]
    NonMonotoneTime(i64),
    /// Malformed file contents.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// A leaf series has zero variance over the training range.
    #[error("leaf node {0} has zero variance over the training range")]
    ZeroVarianceLeaf(usize),
    /// The panel was already preprocessed.
    #[error("panel is already preprocessed")]
    AlreadyPreprocessed,
    /// No valid training windows could be built.
    #[error("window construction produced no windows")]
    EmptyWindowSet,
    /// Panel dimensions do not match the hierarchy.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// Underlying IO failure.
    #[error("io error: {0}")]
    Io(String),
}

/// Errors raised by Gaussian math routines.
#[derive(Debug, Clone, Error)]
pub enum GaussianError {
    /// A standard deviation must be strictly positive and finite.
    #[error("invalid standard deviation {0}")]
    InvalidSigma(f64),
    /// Child aggregation needs at least one child.
    #[error("empty child set")]
    EmptyChildren,
    /// Coherency loss requires at least one internal node.
    #[error("hierarchy has no internal node")]
    NoInternalNode,
    /// Sample-based fits need non-degenerate samples.
    #[error("degenerate samples: all values equal")]
    DegenerateSamples,
    /// Forecast set does not cover the hierarchy.
    #[error("forecast set incomplete: missing node {0}")]
    IncompleteForecasts(usize),
}

/// Errors raised by the forecaster model.
#[derive(Debug, Clone, Error)]
pub enum ModelError {
    /// Encoder input must contain at least one observation.
    #[error("empty input sequence")]
    EmptySequence,
    /// A node id outside the configured node count.
    #[error("unknown node index {0}")]
    UnknownNode(usize),
    /// Correlation set unexpectedly empty.
    #[error("empty correlation set")]
    EmptyCorrelationSet,
}

/// Errors raised by the training loop.
#[derive(Debug, Clone, Error)]
pub enum TrainError {
    /// The loss became non-finite.
    #[error("loss became non-finite at epoch {epoch} (batch {batch})")]
    NaNLoss { epoch: usize, batch: usize },
    /// Unknown ablation variant name.
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
    /// Window set was empty.
    #[error("no training windows: {0}")]
    NoWindows(String),
    /// Propagated data error.
    #[error(transparent)]
    Data(#[from] DataError),
    /// Propagated model error.
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Errors raised by evaluation and the missing-data protocol.
#[derive(Debug, Clone, Error)]
pub enum EvalError {
    /// Forecasts and truth must cover the same node set.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// Propagated Gaussian error.
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    /// Propagated model error.
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Errors raised when reading or writing checkpoints.
#[derive(Debug, Clone, Error)]
pub enum CheckpointError {
    /// Underlying IO failure.
    #[error("io error: {0}")]
    Io(String),
    /// Malformed checkpoint contents.
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    /// Schema version mismatch.
    #[error("unsupported checkpoint schema version {0}")]
    SchemaVersion(u32),
}
