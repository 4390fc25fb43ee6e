//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible; names both offending tape nodes.
    #[error("dimension mismatch in {op}: node {lhs_node} is {lhs_rows}x{lhs_cols}, node {rhs_node} is {rhs_rows}x{rhs_cols}")]
    Dimension {
        op: &'static str,
        lhs_node: usize,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_node: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    #[error("invalid tape state: {0}")]
    TapeState(&'static str),

    #[error("network shape error: {0}")]
    NetworkShape(String),

    #[error("input width mismatch: expected {expected} features, got {actual}")]
    InputWidth { expected: usize, actual: usize },

    #[error("mask shape does not match parameters: {0}")]
    MaskShape(String),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("path enumeration refused: {paths} paths exceeds guard of {guard} (use the forward-pass computation instead)")]
    PathGuard { paths: u128, guard: u128 },

    #[error("network has no scaling layers; channel scores are undefined")]
    NoScalingLayers,

    #[error("non-finite gradient in layer {layer}")]
    NumericGradient { layer: usize },

    #[error("non-finite objective at epoch {epoch}, batch {batch}")]
    NumericObjective { epoch: usize, batch: usize },

    #[error("pruning would empty layer {layer}; refusing (guaranteed collapse)")]
    EmptiesLayer { layer: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("fine-tuning requires a pruned network (no mask present)")]
    MissingMask,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
