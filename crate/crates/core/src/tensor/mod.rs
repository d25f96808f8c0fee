//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheaply clonable handle to a contiguous row-major buffer
//! plus an optional gradient buffer. Differentiable operations live in
//! [`ops`]; they record their backward rule on a [`Tape`](tape::Tape) when one
//! is passed in, and run as plain math when it is not (evaluation mode).
//!
//! Cloning a handle aliases storage. That aliasing is load-bearing: weight
//! tying (one embedding table read by several network parts) is expressed by
//! cloning the handle, so one optimizer update is visible everywhere at once.

pub mod ops;
pub mod raw;
pub mod tape;

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: shape {shape:?} has {actual} elements, buffer has {expected}")]
    BadBuffer {
        op: &'static str,
        shape: Vec<usize>,
        actual: usize,
        expected: usize,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward: loss was not produced under this tape")]
    LossNotOnTape,
    #[error("{op}: no loss positions")]
    NoLossPositions { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

struct TensorData<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    /// Id of the tape this tensor was recorded on as an op output, if any.
    tape_id: Option<u64>,
}

/// Handle to an n-dimensional array of scalars.
pub struct Tensor<T: Scalar> {
    inner: Rc<RefCell<TensorData<T>>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.inner.borrow();
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            d.shape, d.requires_grad
        )
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if numel(&shape) != data.len() {
            return Err(TensorError::BadBuffer {
                op: "from_vec",
                actual: numel(&shape),
                expected: data.len(),
                shape,
            });
        }
        Ok(Self::new_unchecked(shape, data))
    }

    pub(crate) fn new_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                shape,
                data,
                grad: None,
                requires_grad: false,
                tape_id: None,
            })),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::new_unchecked(shape, vec![T::zero(); n])
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = numel(&shape);
        Self::new_unchecked(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Self::new_unchecked(vec![], vec![value])
    }

    /// Marks this tensor as a trainable leaf. Returns self for chaining.
    pub fn requires_grad(self) -> Self {
        self.inner.borrow_mut().requires_grad = true;
        self
    }

    pub fn is_requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub(crate) fn set_requires_grad(&self, flag: bool) {
        self.inner.borrow_mut().requires_grad = flag;
    }

    pub(crate) fn set_tape_id(&self, id: u64) {
        self.inner.borrow_mut().tape_id = Some(id);
    }

    pub(crate) fn tape_id(&self) -> Option<u64> {
        self.inner.borrow().tape_id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn rank(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    /// Identity of the underlying storage; equal ids mean tied weights.
    pub fn storage_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub fn same_storage(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.borrow(), |d| d.data.as_slice())
    }

    pub fn data_mut(&self) -> RefMut<'_, [T]> {
        RefMut::map(self.inner.borrow_mut(), |d| d.data.as_mut_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.borrow().data.clone()
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> T {
        let d = self.inner.borrow();
        debug_assert_eq!(d.data.len(), 1, "item() on non-scalar tensor");
        d.data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.borrow().grad.clone()
    }

    /// Gradient, treating "never touched" as all zeros.
    pub fn grad_or_zeros(&self) -> Vec<T> {
        let d = self.inner.borrow();
        match &d.grad {
            Some(g) => g.clone(),
            None => vec![T::zero(); d.data.len()],
        }
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        let mut d = self.inner.borrow_mut();
        debug_assert_eq!(delta.len(), d.data.len(), "gradient size mismatch");
        match &mut d.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => d.grad = Some(delta.to_vec()),
        }
    }

    /// Overwrites the stored values (used by the optimizer); shape is fixed.
    pub fn set_data(&self, values: &[T]) {
        let mut d = self.inner.borrow_mut();
        assert_eq!(values.len(), d.data.len(), "set_data size mismatch");
        d.data.copy_from_slice(values);
    }

    /// Deep copy with no gradient state.
    pub fn detached_copy(&self) -> Tensor<T> {
        let d = self.inner.borrow();
        Tensor::new_unchecked(d.shape.clone(), d.data.clone())
    }

    pub fn has_non_finite(&self) -> bool {
        self.inner.borrow().data.iter().any(|v| !v.is_finite())
    }
}
