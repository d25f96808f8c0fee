//! Central finite-difference gradient verification.
//!
//! Runs in 64-bit: perturb one parameter element at a time, recompute the
//! loss, and compare the two-sided difference quotient against the analytic
//! gradient from the tape.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference d(loss)/d(param[i]) for the listed element indices.
///
/// `loss_fn` must recompute the loss from the parameter's *current* contents;
/// the original values are restored before returning.
pub fn fd_grad<F: FnMut() -> f64>(
    param: &Tensor<f64>,
    indices: &[usize],
    mut loss_fn: F,
    h: f64,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let original = param.data()[i];
        param.data_mut()[i] = original + h;
        let plus = loss_fn();
        param.data_mut()[i] = original - h;
        let minus = loss_fn();
        param.data_mut()[i] = original;
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

/// Largest elementwise relative error between two gradient estimates.
///
/// Differences below `atol` count as zero error, so elements whose true
/// gradient is numerically zero do not blow up the ratio.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], atol: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if diff <= atol {
                0.0
            } else {
                diff / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max)
}

/// Convenience: checks every element of `param` against finite differences
/// and returns the worst relative error.
pub fn check_all<T, F>(param: &Tensor<f64>, analytic: &[f64], loss_fn: F, h: f64, atol: f64) -> f64
where
    F: FnMut() -> f64,
    T: Scalar,
{
    let indices: Vec<usize> = (0..param.numel()).collect();
    let numeric = fd_grad(param, &indices, loss_fn, h);
    max_rel_err(analytic, &numeric, atol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ops, tape::Tape};

    #[test]
    fn fd_matches_tape_on_matmul_spec_case() {
        // gradient of sum(matmul(A, B)) w.r.t. A on a random 4x5 * 5x3
        use rand::{Rng as _, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let a_data: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b_data: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = Tensor::from_vec(vec![4, 5], a_data).unwrap().requires_grad();
        let b = Tensor::from_vec(vec![5, 3], b_data).unwrap();

        let tape = Tape::new();
        let loss = ops::sum(Some(&tape), &ops::matmul(Some(&tape), &a, &b).unwrap()).unwrap();
        tape.backward(&loss).unwrap();
        let analytic = a.grad().unwrap();

        let numeric = fd_grad(
            &a,
            &(0..20).collect::<Vec<_>>(),
            || {
                ops::sum(None, &ops::matmul(None, &a, &b).unwrap())
                    .unwrap()
                    .item()
            },
            1e-6,
        );
        assert!(max_rel_err(&analytic, &numeric, 1e-9) < 1e-4);
    }
}
