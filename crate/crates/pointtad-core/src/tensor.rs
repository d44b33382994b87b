//! Dense row-major tensors in double precision.
//!
//! `Tensor` is a plain value type: shape plus a flat `f64` buffer. Gradient
//! tracking lives in [`crate::graph`]; evaluation and data-generation code
//! uses tensors directly.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by tensor and graph operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Two operand shapes are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Axis index out of range for the operand rank.
    BadAxis { op: &'static str, axis: usize, rank: usize },
    /// Buffer length does not match the product of the shape extents.
    LengthMismatch { expected: usize, got: usize },
    /// An operation that requires a scalar received a non-scalar tensor.
    NotScalar { op: &'static str, shape: Vec<usize> },
    /// An element index is out of bounds.
    IndexOutOfBounds { index: usize, len: usize },
    /// Empty input where at least one element is required.
    Empty { op: &'static str },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            TensorError::BadAxis { op, axis, rank } => {
                write!(f, "{op}: axis {axis} out of range for rank {rank}")
            }
            TensorError::LengthMismatch { expected, got } => {
                write!(f, "buffer length {got} does not match shape product {expected}")
            }
            TensorError::NotScalar { op, shape } => {
                write!(f, "{op}: expected a scalar, got shape {shape:?}")
            }
            TensorError::IndexOutOfBounds { index, len } => {
                write!(f, "element index {index} out of bounds for length {len}")
            }
            TensorError::Empty { op } => write!(f, "{op}: empty input"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TensorError {}

/// Dense n-dimensional array of `f64`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and a row-major buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch { expected, got: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// Zero-dimensional scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f64]) -> Self {
        Tensor { shape: vec![values.len()], data: values.to_vec() }
    }

    /// 2-D tensor from rows; all rows must share a length.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "matrix",
                    lhs: vec![r, c],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::from_vec(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar (or 1-element) tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar { op: "item", shape: self.shape.clone() })
        }
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Row slice of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Iterates all "lanes" along `axis`: yields the flat index of each lane
/// start and the stride between consecutive lane elements.
///
/// A lane is a 1-D slice obtained by fixing every coordinate except `axis`.
pub fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let st = strides(shape);
    let lane_stride = st[axis];
    let extent = shape[axis];
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let lanes = total / extent;
    // Enumerate lane origins by skipping the axis coordinate.
    let mut origin = vec![0usize; shape.len()];
    for _ in 0..lanes {
        let mut flat = 0;
        for (d, &c) in origin.iter().enumerate() {
            flat += c * st[d];
        }
        f(flat, lane_stride);
        // Increment the multi-index, skipping `axis`.
        for d in (0..shape.len()).rev() {
            if d == axis {
                continue;
            }
            origin[d] += 1;
            if origin[d] < shape[d] {
                break;
            }
            origin[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(err, TensorError::LengthMismatch { expected: 6, got: 5 });
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides(&[5]), vec![1]);
        assert!(strides(&[]).is_empty());
    }

    #[test]
    fn lane_iteration_covers_every_element_once() {
        let shape = [2, 3, 4];
        for axis in 0..3 {
            let mut seen = vec![0u32; 24];
            for_each_lane(&shape, axis, |start, stride| {
                for k in 0..shape[axis] {
                    seen[start + k * stride] += 1;
                }
            });
            assert!(seen.iter().all(|&c| c == 1), "axis {axis}: {seen:?}");
        }
    }

    #[test]
    fn scalar_item() {
        assert_eq!(Tensor::scalar(2.5).item().unwrap(), 2.5);
        assert!(Tensor::zeros(&[3]).item().is_err());
    }
}
