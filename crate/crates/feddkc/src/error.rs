use thiserror::Error;

/// Errors produced by any part of the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Logits contained NaN/Inf or had an unusable length.
    #[error("invalid knowledge: {0}")]
    InvalidKnowledge(String),

    /// Two vectors/batches that must agree in length did not.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A class label outside [0, C).
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    /// Refinement target outside its admissible interval.
    #[error("invalid refinement target: {0}")]
    InvalidTarget(String),

    /// Constant logits: the entropy is log2(C) at every temperature, so no
    /// root exists unless the target entropy already sits there.
    #[error("degenerate knowledge: {0}")]
    DegenerateKnowledge(String),

    /// No sign change found for the root search, even after expansion.
    #[error("bracket failure: {0}")]
    BracketFailure(String),

    /// Bisection ran out of iterations; `best` is the last midpoint.
    #[error("tolerance not met after max iterations (best estimate {best})")]
    ToleranceNotMet { best: f64 },

    /// A kernel function failed the sampled admissibility checks.
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    /// Training produced a non-finite loss or weight.
    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),

    /// Malformed dataset/config text input.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Partitioning could not give every client at least one sample.
    #[error("partition failure: {0}")]
    PartitionFailure(String),

    /// A config field failed validation; `field` names the offending key.
    #[error("invalid config field `{field}`: {msg}")]
    InvalidConfig { field: String, msg: String },

    /// Two run directories cannot be compared (manifest mismatch/missing).
    #[error("incomparable runs: {0}")]
    IncomparableRuns(String),

    /// Malformed checkpoint payload.
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
