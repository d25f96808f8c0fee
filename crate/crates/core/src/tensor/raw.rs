//! Unrecorded compute kernels shared by forward and backward paths.
//!
//! Everything here is plain math on slices: broadcasting, reductions, and the
//! gemm-backed matrix product. Parallel splits are always along disjoint
//! output regions, so results are independent of thread count.

use rayon::prelude::*;

use super::TensorError;
use crate::scalar::Scalar;

/// Below this many fused multiply-adds a matmul stays single-threaded.
const PAR_FLOP_THRESHOLD: usize = 1 << 20;

pub fn broadcast_shapes(
    op: &'static str,
    lhs: &[usize],
    rhs: &[usize],
) -> Result<Vec<usize>, TensorError> {
    let rank = lhs.len().max(rhs.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let a = if i < rank - lhs.len() {
            1
        } else {
            lhs[i - (rank - lhs.len())]
        };
        let b = if i < rank - rhs.len() {
            1
        } else {
            rhs[i - (rank - rhs.len())]
        };
        out[i] = if a == b || b == 1 {
            a
        } else if a == 1 {
            b
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: lhs.to_vec(),
                rhs: rhs.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Row-major strides, with 0 on axes being broadcast up to `out_shape`.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Elementwise combine with numpy-style broadcasting.
pub fn binary_broadcast<T: Scalar>(
    op: &'static str,
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<T>, Vec<usize>), TensorError> {
    if a_shape == b_shape {
        let out = a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
        return Ok((out, a_shape.to_vec()));
    }
    let out_shape = broadcast_shapes(op, a_shape, b_shape)?;
    let n = super::numel(&out_shape);
    // Fast path: b is a contiguous suffix of a (e.g. bias over the last axis).
    if a_shape == out_shape.as_slice() && !b.is_empty() && n % b.len() == 0 {
        let suffix: usize = b_shape.iter().product();
        if suffix == b.len() && a_shape.ends_with(b_shape) {
            let mut out = Vec::with_capacity(n);
            for chunk in a.chunks_exact(suffix) {
                out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
            return Ok((out, out_shape));
        }
    }
    let sa = broadcast_strides(a_shape, &out_shape);
    let sb = broadcast_strides(b_shape, &out_shape);
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut ao = 0usize;
    let mut bo = 0usize;
    for _ in 0..n {
        out.push(f(a[ao], b[bo]));
        // odometer increment
        for d in (0..rank).rev() {
            idx[d] += 1;
            ao += sa[d];
            bo += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ao -= sa[d] * out_shape[d];
            bo -= sb[d] * out_shape[d];
        }
    }
    Ok((out, out_shape))
}

/// Sums `grad` (shaped `from`) down to shape `to`, undoing a broadcast.
pub fn reduce_to_shape<T: Scalar>(grad: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return grad.to_vec();
    }
    let strides = broadcast_strides(to, from);
    let rank = from.len();
    let mut out = vec![T::zero(); super::numel(to)];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &g in grad {
        out[off] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < from[d] {
                break;
            }
            idx[d] = 0;
            off -= strides[d] * from[d];
        }
    }
    out
}

struct MatView {
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

/// Effective (rows, cols, strides) of the trailing matrix, after an optional
/// transpose flag, for a row-major tensor whose last two dims are (r, c).
fn mat_view(shape: &[usize], transpose: bool) -> MatView {
    let r = shape[shape.len() - 2];
    let c = shape[shape.len() - 1];
    if transpose {
        MatView {
            rows: c,
            cols: r,
            rs: 1,
            cs: c as isize,
        }
    } else {
        MatView {
            rows: r,
            cols: c,
            rs: c as isize,
            cs: 1,
        }
    }
}

/// Batched matrix product with broadcasting over leading dims.
///
/// `ta`/`tb` transpose the trailing matrix of the respective operand without
/// materializing it.
pub fn matmul<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    ta: bool,
    tb: bool,
) -> Result<(Vec<T>, Vec<usize>), TensorError> {
    if a_shape.len() < 2 || b_shape.len() < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a_shape.to_vec(),
            rhs: b_shape.to_vec(),
        });
    }
    let va = mat_view(a_shape, ta);
    let vb = mat_view(b_shape, tb);
    if va.cols != vb.rows {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a_shape.to_vec(),
            rhs: b_shape.to_vec(),
        });
    }
    let (m, k, n) = (va.rows, va.cols, vb.cols);

    let a_batch = &a_shape[..a_shape.len() - 2];
    let b_batch = &b_shape[..b_shape.len() - 2];
    let batch_shape = broadcast_shapes("matmul", a_batch, b_batch)?;
    let batch_count: usize = batch_shape.iter().product();

    let mut out_shape = batch_shape.clone();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![T::zero(); batch_count * m * n];

    let a_mat_len = a_shape[a_shape.len() - 2] * a_shape[a_shape.len() - 1];
    let b_mat_len = b_shape[b_shape.len() - 2] * b_shape[b_shape.len() - 1];
    let sa = broadcast_strides(a_batch, &batch_shape);
    let sb = broadcast_strides(b_batch, &batch_shape);

    // batch index -> flat offsets into a and b
    let offsets = |flat: usize| -> (usize, usize) {
        let mut rem = flat;
        let mut ai = 0usize;
        let mut bi = 0usize;
        for d in (0..batch_shape.len()).rev() {
            let coord = rem % batch_shape[d];
            rem /= batch_shape[d];
            ai += coord * sa[d];
            bi += coord * sb[d];
        }
        (ai * a_mat_len, bi * b_mat_len)
    };

    let flops = batch_count * m * k * n;
    let run_one = |batch: usize, c: &mut [T]| {
        let (ao, bo) = offsets(batch);
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.as_ptr().add(ao),
                va.rs,
                va.cs,
                b.as_ptr().add(bo),
                vb.rs,
                vb.cs,
                T::zero(),
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };

    if batch_count > 1 && flops > PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(m * n)
            .enumerate()
            .for_each(|(batch, c)| run_one(batch, c));
    } else if batch_count == 1 && flops > PAR_FLOP_THRESHOLD && m > 1 {
        // split output rows across threads
        let threads = rayon::current_num_threads().max(1);
        let rows_per = m.div_ceil(threads);
        out.par_chunks_mut(rows_per * n)
            .enumerate()
            .for_each(|(chunk, c)| {
                let row0 = chunk * rows_per;
                let rows = c.len() / n;
                unsafe {
                    T::gemm(
                        rows,
                        k,
                        n,
                        T::one(),
                        a.as_ptr().offset(row0 as isize * va.rs),
                        va.rs,
                        va.cs,
                        b.as_ptr(),
                        vb.rs,
                        vb.cs,
                        T::zero(),
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            });
    } else {
        for (batch, c) in out.chunks_mut(m * n).enumerate() {
            run_one(batch, c);
        }
    }
    Ok((out, out_shape))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(
            broadcast_shapes("t", &[2, 1, 3], &[4, 1]).unwrap(),
            vec![2, 4, 3]
        );
        assert!(broadcast_shapes("t", &[2, 3], &[4]).is_err());
    }

    #[test]
    fn binary_broadcast_suffix_and_general() {
        // [2,2] + [2] (suffix path)
        let (out, shape) =
            binary_broadcast("t", &[1.0f64, 2.0, 3.0, 4.0], &[2, 2], &[10.0, 20.0], &[2], |a, b| {
                a + b
            })
            .unwrap();
        assert_eq!(shape, vec![2, 2]);
        assert_eq!(out, vec![11.0, 22.0, 13.0, 24.0]);
        // [2,1] * [1,3] (general odometer path)
        let (out, shape) =
            binary_broadcast("t", &[2.0f64, 3.0], &[2, 1], &[1.0, 10.0, 100.0], &[1, 3], |a, b| {
                a * b
            })
            .unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(out, vec![2.0, 20.0, 200.0, 3.0, 30.0, 300.0]);
    }

    #[test]
    fn reduce_undoes_broadcast() {
        // grad of shape [2,2] reduced to [2] (summed over rows)
        let red = reduce_to_shape(&[1.0f64, 2.0, 3.0, 4.0], &[2, 2], &[2]);
        assert_eq!(red, vec![4.0, 6.0]);
        // reduce to scalar shape []
        let red = reduce_to_shape(&[1.0f64, 2.0, 3.0, 4.0], &[4], &[]);
        assert_eq!(red, vec![10.0]);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2]] * [[3],[4]] = [[11]]
        let (out, shape) = matmul(&[1.0f32, 2.0], &[1, 2], &[3.0, 4.0], &[2, 1], false, false).unwrap();
        assert_eq!(shape, vec![1, 1]);
        assert_eq!(out, vec![11.0]);
    }

    #[test]
    fn matmul_transpose_flags() {
        // a = [[1,2],[3,4]] ; a^T b with b = I
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let eye = [1.0f64, 0.0, 0.0, 1.0];
        let (out, _) = matmul(&a, &[2, 2], &eye, &[2, 2], true, false).unwrap();
        assert_eq!(out, vec![1.0, 3.0, 2.0, 4.0]);
        let (out, _) = matmul(&eye, &[2, 2], &a, &[2, 2], false, true).unwrap();
        assert_eq!(out, vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn matmul_batched_with_broadcast() {
        // a: [2,1,2] batch of two row-vectors, b: [2,2] shared
        let a = [1.0f64, 0.0, 0.0, 1.0];
        let b = [1.0f64, 2.0, 3.0, 4.0];
        let (out, shape) = matmul(&a, &[2, 1, 2], &b, &[2, 2], false, false).unwrap();
        assert_eq!(shape, vec![2, 1, 2]);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let err = matmul(&[0.0f32; 6], &[2, 3], &[0.0; 8], &[4, 2], false, false).unwrap_err();
        match err {
            TensorError::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
