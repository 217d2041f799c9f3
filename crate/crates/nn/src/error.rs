use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = NnError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: Shape,
        got: Shape,
    },
    #[error("{op}: {axis} mismatch ({left} vs {right})")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{op}: spatial size {h}x{w} too small (need at least {min})")]
    TooSmall {
        op: &'static str,
        h: usize,
        w: usize,
        min: usize,
    },
    #[error("shape {shape} needs {} elements, got {len}", shape.numel())]
    DataLength { shape: Shape, len: usize },
    #[error("expected a one-element tensor, got {shape}")]
    NotScalar { shape: Shape },
    #[error("{0}: invalid argument: {1}")]
    InvalidArgument(&'static str, String),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("non-finite gradient for parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("adam: {params} parameters but {grads} gradients")]
    ParamCount { params: usize, grads: usize },
}
