use alloc::vec::Vec;
use core::fmt;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    /// Flat data does not match the element count of the shape.
    DataLength { shape: Vec<usize>, actual: usize },
    InvalidAxis { axis: usize, rank: usize },
    IndexOutOfRange { index: usize, len: usize },
    NonPositiveLog,
    NonScalarLoss { shape: Vec<usize> },
    /// A `Var` that does not belong to this tape.
    UnknownVar(usize),
    InvalidArgument(&'static str),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "shape mismatch in {op}: {left:?} vs {right:?}")
            }
            TensorError::DataLength { shape, actual } => {
                write!(f, "shape {shape:?} needs {} elements, got {actual}", super::numel(shape))
            }
            TensorError::InvalidAxis { axis, rank } => write!(f, "axis {axis} is invalid for rank {rank}"),
            TensorError::IndexOutOfRange { index, len } => write!(f, "index {index} out of range for length {len}"),
            TensorError::NonPositiveLog => f.write_str("non-positive input to log"),
            TensorError::NonScalarLoss { shape } => write!(f, "backward needs a scalar loss, got shape {shape:?}"),
            TensorError::UnknownVar(id) => write!(f, "variable {id} is not on this tape"),
            TensorError::InvalidArgument(msg) => f.write_str(msg),
        }
    }
}

impl core::error::Error for TensorError {}
