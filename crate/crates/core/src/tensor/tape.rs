//! Operation tape for reverse-mode differentiation.
//!
//! Ops push one node per executed operation; [`Tape::backward`] replays the
//! nodes in exact reverse construction order, which is a reverse topological
//! order of the dataflow graph. Gradients accumulate into each tensor's own
//! grad buffer, so repeated backward calls (one per micro-batch) sum up.
//!
//! A tape is single-threaded by construction (`RefCell` inside); nothing
//! shares a live tape across threads.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Tensor, TensorError};
use crate::scalar::Scalar;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

struct Node<T: Scalar> {
    label: &'static str,
    out: Tensor<T>,
    backward: Option<Box<dyn FnOnce()>>,
}

pub struct Tape<T: Scalar> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Records an op output and its backward rule. Marks the output as
    /// gradient-carrying so downstream ops keep recording.
    pub(crate) fn record(
        &self,
        label: &'static str,
        out: &Tensor<T>,
        backward: impl FnOnce() + 'static,
    ) {
        out.set_requires_grad(true);
        out.set_tape_id(self.id);
        self.nodes.borrow_mut().push(Node {
            label,
            out: out.clone(),
            backward: Some(Box::new(backward)),
        });
    }

    pub fn num_ops(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Label of the first recorded output containing a NaN or infinity, in
    /// construction order. Used for loss-abort diagnostics.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.nodes
            .borrow()
            .iter()
            .find(|n| n.out.has_non_finite())
            .map(|n| n.label)
    }

    /// Runs the reverse pass from a scalar loss, consuming the recorded nodes.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<(), TensorError> {
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss.shape(),
            });
        }
        if loss.tape_id() != Some(self.id) {
            return Err(TensorError::LossNotOnTape);
        }
        loss.accumulate_grad(&[T::one()]);
        let mut nodes = self.nodes.borrow_mut();
        for node in nodes.iter_mut().rev() {
            if let Some(f) = node.backward.take() {
                f();
            }
        }
        nodes.clear();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::new();
        let x = Tensor::<f64>::from_vec(vec![2], vec![1.0, 2.0])
            .unwrap()
            .requires_grad();
        let y = ops::mul(Some(&tape), &x, &x).unwrap();
        assert!(matches!(
            tape.backward(&y),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn backward_rejects_foreign_loss() {
        let tape = Tape::new();
        let other = Tape::new();
        let x = Tensor::<f64>::scalar(3.0).requires_grad();
        let y = ops::mul(Some(&other), &x, &x).unwrap();
        assert_eq!(tape.backward(&y), Err(TensorError::LossNotOnTape));
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let tape = Tape::new();
        let x = Tensor::<f64>::scalar(3.0).requires_grad();
        let y = ops::mul(Some(&tape), &x, &x).unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn unreachable_parameter_keeps_zero_grad() {
        let tape = Tape::new();
        let x = Tensor::<f64>::scalar(3.0).requires_grad();
        let unused = Tensor::<f64>::scalar(5.0).requires_grad();
        let y = ops::mul(Some(&tape), &x, &x).unwrap();
        tape.backward(&y).unwrap();
        assert!(unused.grad().is_none());
        assert_eq!(unused.grad_or_zeros(), vec![0.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::scalar(3.0).requires_grad();
        for _ in 0..2 {
            let tape = Tape::new();
            let y = ops::mul(Some(&tape), &x, &x).unwrap();
            tape.backward(&y).unwrap();
        }
        assert_eq!(x.grad().unwrap(), vec![12.0]);
    }

    #[test]
    fn eval_mode_records_nothing() {
        let x = Tensor::<f64>::scalar(3.0).requires_grad();
        let y = ops::mul(None, &x, &x).unwrap();
        assert!(!y.is_requires_grad());
        assert_eq!(y.item(), 9.0);
    }
}
