//! Dense row-major tensor value type.
//!
//! Tensors are immutable values; cloning is cheap (the buffer is shared).
//! Feature maps use `[channels, height, width]` layout. A tensor optionally
//! carries a tape node id when it was produced by (or registered on) a
//! [`crate::tape::Tape`].

use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Identifier of an operation record on a tape.
pub type NodeId = usize;

/// Dense N-dimensional array, row-major.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    node: Option<NodeId>,
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor from dims and a flat row-major buffer.
    pub fn from_vec(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        let numel: usize = dims.iter().product();
        if dims.is_empty() {
            return shape_err("tensor rank must be >= 1");
        }
        if numel != data.len() {
            return shape_err(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                numel,
                data.len()
            ));
        }
        Ok(Self {
            dims,
            data: Arc::new(data),
            requires_grad: false,
            node: None,
        })
    }

    /// All-zero tensor.
    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        let dims = dims.into();
        let numel: usize = dims.iter().product();
        Self {
            dims,
            data: Arc::new(vec![T::zero(); numel]),
            requires_grad: false,
            node: None,
        }
    }

    /// Tensor filled with a constant.
    pub fn filled(dims: impl Into<Vec<usize>>, value: T) -> Self {
        let dims = dims.into();
        let numel: usize = dims.iter().product();
        Self {
            dims,
            data: Arc::new(vec![value; numel]),
            requires_grad: false,
            node: None,
        }
    }

    /// Rank-1 single-element tensor (the scalar convention used by losses).
    pub fn scalar(value: T) -> Self {
        Self::filled([1usize], value)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Shared handle to the underlying buffer.
    pub(crate) fn buffer(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return shape_err(format!("item() on tensor with dims {:?}", self.dims));
        }
        Ok(self.data[0])
    }

    /// Same values, new dims (numel must match). Drops tape tracking; the
    /// tracked version lives on [`crate::tape::Tape::reshape`].
    pub fn reshaped(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        let numel: usize = dims.iter().product();
        if numel != self.numel() {
            return shape_err(format!(
                "reshape {:?} -> {:?} changes element count",
                self.dims, dims
            ));
        }
        Ok(Self {
            dims,
            data: Arc::clone(&self.data),
            requires_grad: false,
            node: None,
        })
    }

    /// Detached copy of this value (no tape reference, no grad flag).
    pub fn detached(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            node: None,
        }
    }

    /// Convert elementwise to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                    .collect(),
            ),
            requires_grad: false,
            node: None,
        }
    }

    pub(crate) fn tracked(dims: Vec<usize>, data: Arc<Vec<T>>, node: NodeId, requires_grad: bool) -> Self {
        Self {
            dims,
            data,
            requires_grad,
            node: Some(node),
        }
    }

    pub(crate) fn untracked(dims: Vec<usize>, data: Arc<Vec<T>>) -> Self {
        Self {
            dims,
            data,
            requires_grad: false,
            node: None,
        }
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    /// Value equality: dims and bit-level element equality.
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a == b || (a.is_nan() && b.is_nan()))
    }
}
