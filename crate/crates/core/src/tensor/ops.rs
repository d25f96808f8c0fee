//! Differentiable tensor operations.
//!
//! Every op takes an optional tape (`Tp<T>`). With `Some(tape)` and at least
//! one gradient-carrying input, the op records its backward rule; with `None`
//! it is plain evaluation. Backward rules accumulate into input grads and
//! never touch tensors whose `requires_grad` is false.

use rand::Rng;
use rayon::prelude::*;

use super::raw;
use super::tape::Tape;
use super::{numel, Tensor, TensorError};
use crate::scalar::Scalar;

/// Optional tape handle threaded through model code.
pub type Tp<'a, T> = Option<&'a Tape<T>>;

/// Parallelize simple row loops only past this output size.
const PAR_ELEMS: usize = 1 << 15;

fn wants_grad<T: Scalar>(tape: Tp<T>, inputs: &[&Tensor<T>]) -> bool {
    tape.is_some() && inputs.iter().any(|t| t.is_requires_grad())
}

// ---------------------------------------------------------------------------
// matrix product
// ---------------------------------------------------------------------------

/// `a @ b` with broadcasting over leading batch dimensions.
pub fn matmul<T: Scalar>(tape: Tp<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    matmul_impl(tape, a, b, false)
}

/// `a @ b^T` (trailing matrix of `b` transposed in place, no copy).
pub fn matmul_nt<T: Scalar>(tape: Tp<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    matmul_impl(tape, a, b, true)
}

fn matmul_impl<T: Scalar>(
    tape: Tp<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    tb: bool,
) -> Result<Tensor<T>, TensorError> {
    let a_shape = a.shape();
    let b_shape = b.shape();
    let (data, out_shape) = raw::matmul(&a.data(), &a_shape, &b.data(), &b_shape, false, tb)?;
    let out = Tensor::new_unchecked(out_shape.clone(), data);
    if wants_grad(tape, &[a, b]) {
        let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
        let label = if tb { "matmul_nt" } else { "matmul" };
        tape.unwrap().record(label, &out, move || {
            let Some(d_out) = o2.grad() else { return };
            if a2.is_requires_grad() {
                let (d_full, d_shape) = {
                    let bd = b2.data();
                    raw::matmul(&d_out, &out_shape, &bd, &b_shape, false, !tb)
                        .expect("matmul backward dA")
                };
                let d_a = raw::reduce_to_shape(&d_full, &d_shape, &a_shape);
                a2.accumulate_grad(&d_a);
            }
            if b2.is_requires_grad() {
                let (d_full, d_shape) = {
                    let ad = a2.data();
                    if tb {
                        // C = A B^T  =>  dB = dC^T A
                        raw::matmul(&d_out, &out_shape, &ad, &a_shape, true, false)
                    } else {
                        // C = A B    =>  dB = A^T dC
                        raw::matmul(&ad, &a_shape, &d_out, &out_shape, true, false)
                    }
                    .expect("matmul backward dB")
                };
                let d_b = raw::reduce_to_shape(&d_full, &d_shape, &b_shape);
                b2.accumulate_grad(&d_b);
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// elementwise with broadcasting
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

pub fn add<T: Scalar>(tape: Tp<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    binary(tape, a, b, BinKind::Add)
}

pub fn sub<T: Scalar>(tape: Tp<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    binary(tape, a, b, BinKind::Sub)
}

pub fn mul<T: Scalar>(tape: Tp<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    binary(tape, a, b, BinKind::Mul)
}

fn binary<T: Scalar>(
    tape: Tp<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    kind: BinKind,
) -> Result<Tensor<T>, TensorError> {
    let (label, f): (&'static str, fn(T, T) -> T) = match kind {
        BinKind::Add => ("add", |x, y| x + y),
        BinKind::Sub => ("sub", |x, y| x - y),
        BinKind::Mul => ("mul", |x, y| x * y),
    };
    let a_shape = a.shape();
    let b_shape = b.shape();
    let (data, out_shape) = raw::binary_broadcast(label, &a.data(), &a_shape, &b.data(), &b_shape, f)?;
    let out = Tensor::new_unchecked(out_shape.clone(), data);
    if wants_grad(tape, &[a, b]) {
        let (a2, b2, o2) = (a.clone(), b.clone(), out.clone());
        tape.unwrap().record(label, &out, move || {
            let Some(d_out) = o2.grad() else { return };
            match kind {
                BinKind::Add | BinKind::Sub => {
                    if a2.is_requires_grad() {
                        a2.accumulate_grad(&raw::reduce_to_shape(&d_out, &out_shape, &a_shape));
                    }
                    if b2.is_requires_grad() {
                        let mut d_b = raw::reduce_to_shape(&d_out, &out_shape, &b_shape);
                        if matches!(kind, BinKind::Sub) {
                            for v in &mut d_b {
                                *v = -*v;
                            }
                        }
                        b2.accumulate_grad(&d_b);
                    }
                }
                BinKind::Mul => {
                    if a2.is_requires_grad() {
                        let d_full = {
                            let bd = b2.data();
                            raw::binary_broadcast("mul_bwd", &d_out, &out_shape, &bd, &b_shape, |g, y| g * y)
                                .expect("mul backward dA")
                                .0
                        };
                        a2.accumulate_grad(&raw::reduce_to_shape(&d_full, &out_shape, &a_shape));
                    }
                    if b2.is_requires_grad() {
                        let d_full = {
                            let ad = a2.data();
                            raw::binary_broadcast("mul_bwd", &d_out, &out_shape, &ad, &a_shape, |g, x| g * x)
                                .expect("mul backward dB")
                                .0
                        };
                        b2.accumulate_grad(&raw::reduce_to_shape(&d_full, &out_shape, &b_shape));
                    }
                }
            }
        });
    }
    Ok(out)
}

/// `a * c` for a plain scalar constant.
pub fn scale<T: Scalar>(tape: Tp<T>, a: &Tensor<T>, c: T) -> Result<Tensor<T>, TensorError> {
    let data: Vec<T> = a.data().iter().map(|&x| x * c).collect();
    let out = Tensor::new_unchecked(a.shape(), data);
    if wants_grad(tape, &[a]) {
        let (a2, o2) = (a.clone(), out.clone());
        tape.unwrap().record("scale", &out, move || {
            if let Some(d_out) = o2.grad() {
                let d: Vec<T> = d_out.iter().map(|&g| g * c).collect();
                a2.accumulate_grad(&d);
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// shape manipulation
// ---------------------------------------------------------------------------

pub fn reshape<T: Scalar>(
    tape: Tp<T>,
    a: &Tensor<T>,
    new_shape: Vec<usize>,
) -> Result<Tensor<T>, TensorError> {
    if numel(&new_shape) != a.numel() {
        return Err(TensorError::BadBuffer {
            op: "reshape",
            actual: numel(&new_shape),
            expected: a.numel(),
            shape: new_shape,
        });
    }
    let out = Tensor::new_unchecked(new_shape, a.to_vec());
    if wants_grad(tape, &[a]) {
        let (a2, o2) = (a.clone(), out.clone());
        tape.unwrap().record("reshape", &out, move || {
            if let Some(d_out) = o2.grad() {
                a2.accumulate_grad(&d_out);
            }
        });
    }
    Ok(out)
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&d| shape[d]).collect();
    let strides: Vec<usize> = perm.iter().map(|&d| in_strides[d]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off -= strides[d] * out_shape[d];
        }
    }
    (out, out_shape)
}

/// Axis permutation (generalized transpose), materialized.
pub fn permute<T: Scalar>(
    tape: Tp<T>,
    a: &Tensor<T>,
    perm: &[usize],
) -> Result<Tensor<T>, TensorError> {
    let shape = a.shape();
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&d| d >= rank || std::mem::replace(&mut seen[d], true)) {
        return Err(TensorError::Invalid {
            op: "permute",
            msg: format!("{perm:?} is not a permutation of 0..{rank}"),
        });
    }
    let (data, out_shape) = permute_data(&a.data(), &shape, perm);
    let out = Tensor::new_unchecked(out_shape.clone(), data);
    if wants_grad(tape, &[a]) {
        let mut inverse = vec![0usize; rank];
        for (i, &d) in perm.iter().enumerate() {
            inverse[d] = i;
        }
        let (a2, o2) = (a.clone(), out.clone());
        tape.unwrap().record("permute", &out, move || {
            if let Some(d_out) = o2.grad() {
                let (d_a, _) = permute_data(&d_out, &out_shape, &inverse);
                a2.accumulate_grad(&d_a);
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// activations and normalization
// ---------------------------------------------------------------------------

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax<T: Scalar>(tape: Tp<T>, a: &Tensor<T>, axis: usize) -> Result<Tensor<T>, TensorError> {
    let rank = a.rank();
    if axis >= rank {
        return Err(TensorError::BadAxis {
            op: "softmax",
            axis,
            shape: a.shape(),
        });
    }
    if axis == rank - 1 {
        return softmax_last(tape, a);
    }
    // Move the axis last, run the primitive, move it back. The permutes are
    // recorded ops, so the backward pass composes automatically.
    let mut perm: Vec<usize> = (0..rank).filter(|&d| d != axis).collect();
    perm.push(axis);
    let mut inverse = vec![0usize; rank];
    for (i, &d) in perm.iter().enumerate() {
        inverse[d] = i;
    }
    let moved = permute(tape, a, &perm)?;
    let soft = softmax_last(tape, &moved)?;
    permute(tape, &soft, &inverse)
}

fn softmax_rows<T: Scalar>(input: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); input.len()];
    let body = |(row_out, row_in): (&mut [T], &[T])| {
        let mut mx = T::neg_infinity();
        for &x in row_in {
            if x > mx {
                mx = x;
            }
        }
        let mut sum = T::zero();
        for (o, &x) in row_out.iter_mut().zip(row_in) {
            let e = (x - mx).exp();
            *o = e;
            sum += e;
        }
        for o in row_out.iter_mut() {
            *o /= sum;
        }
    };
    if input.len() > PAR_ELEMS {
        out.par_chunks_mut(cols).zip(input.par_chunks(cols)).for_each(body);
    } else {
        out.chunks_mut(cols).zip(input.chunks(cols)).for_each(body);
    }
    out
}

fn softmax_last<T: Scalar>(tape: Tp<T>, a: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let shape = a.shape();
    let cols = *shape.last().ok_or(TensorError::BadAxis {
        op: "softmax",
        axis: 0,
        shape: vec![],
    })?;
    let data = softmax_rows(&a.data(), cols);
    let out = Tensor::new_unchecked(shape, data);
    if wants_grad(tape, &[a]) {
        let (a2, o2) = (a.clone(), out.clone());
        tape.unwrap().record("softmax", &out, move || {
            let Some(d_out) = o2.grad() else { return };
            let y = o2.data();
            let mut d_a = vec![T::zero(); y.len()];
            let body = |(d_row, (y_row, g_row)): (&mut [T], (&[T], &[T]))| {
                let mut dot = T::zero();
                for (&yi, &gi) in y_row.iter().zip(g_row) {
                    dot += yi * gi;
                }
                for ((d, &yi), &gi) in d_row.iter_mut().zip(y_row).zip(g_row) {
                    *d = yi * (gi - dot);
                }
            };
            if y.len() > PAR_ELEMS {
                d_a.par_chunks_mut(cols)
                    .zip(y.par_chunks(cols).zip(d_out.par_chunks(cols)))
                    .for_each(body);
            } else {
                d_a.chunks_mut(cols)
                    .zip(y.chunks(cols).zip(d_out.chunks(cols)))
                    .for_each(body);
            }
            drop(y);
            a2.accumulate_grad(&d_a);
        });
    }
    Ok(out)
}

/// Layer normalization over the last axis, then affine gain/bias.
pub fn layer_norm<T: Scalar>(
    tape: Tp<T>,
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>, TensorError> {
    let shape = x.shape();
    let cols = *shape.last().ok_or(TensorError::BadAxis {
        op: "layer_norm",
        axis: 0,
        shape: vec![],
    })?;
    if gain.numel() != cols || bias.numel() != cols {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: shape,
            rhs: gain.shape(),
        });
    }
    if eps <= T::zero() {
        return Err(TensorError::Invalid {
            op: "layer_norm",
            msg: "epsilon must be > 0".into(),
        });
    }
    let rows = x.numel() / cols;
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); rows];
    {
        let xd = x.data();
        let inv_cols = T::one() / T::from_usize(cols);
        for (r, (xh_row, x_row)) in xhat.chunks_mut(cols).zip(xd.chunks(cols)).enumerate() {
            let mut mean = T::zero();
            for &v in x_row {
                mean += v;
            }
            mean *= inv_cols;
            let mut var = T::zero();
            for &v in x_row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_cols;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for (o, &v) in xh_row.iter_mut().zip(x_row) {
                *o = (v - mean) * inv;
            }
        }
    }
    let mut data = vec![T::zero(); x.numel()];
    {
        let g = gain.data();
        let b = bias.data();
        for (o_row, xh_row) in data.chunks_mut(cols).zip(xhat.chunks(cols)) {
            for i in 0..cols {
                o_row[i] = xh_row[i] * g[i] + b[i];
            }
        }
    }
    let out = Tensor::new_unchecked(x.shape(), data);
    if wants_grad(tape, &[x, gain, bias]) {
        let (x2, g2, b2, o2) = (x.clone(), gain.clone(), bias.clone(), out.clone());
        tape.unwrap().record("layer_norm", &out, move || {
            let Some(d_out) = o2.grad() else { return };
            let inv_cols = T::one() / T::from_usize(cols);
            if x2.is_requires_grad() {
                let d_x = {
                    let g = g2.data();
                    let mut d_x = vec![T::zero(); xhat.len()];
                    for (r, (dx_row, (do_row, xh_row))) in d_x
                        .chunks_mut(cols)
                        .zip(d_out.chunks(cols).zip(xhat.chunks(cols)))
                        .enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for i in 0..cols {
                            let dxh = do_row[i] * g[i];
                            m1 += dxh;
                            m2 += dxh * xh_row[i];
                        }
                        m1 *= inv_cols;
                        m2 *= inv_cols;
                        for i in 0..cols {
                            let dxh = do_row[i] * g[i];
                            dx_row[i] = inv_std[r] * (dxh - m1 - xh_row[i] * m2);
                        }
                    }
                    d_x
                };
                x2.accumulate_grad(&d_x);
            }
            if g2.is_requires_grad() {
                let mut d_g = vec![T::zero(); cols];
                for (do_row, xh_row) in d_out.chunks(cols).zip(xhat.chunks(cols)) {
                    for i in 0..cols {
                        d_g[i] += do_row[i] * xh_row[i];
                    }
                }
                g2.accumulate_grad(&d_g);
            }
            if b2.is_requires_grad() {
                let mut d_b = vec![T::zero(); cols];
                for do_row in d_out.chunks(cols) {
                    for i in 0..cols {
                        d_b[i] += do_row[i];
                    }
                }
                b2.accumulate_grad(&d_b);
            }
        });
    }
    Ok(out)
}

/// Gaussian error linear unit, exact erf form.
pub fn gelu<T: Scalar>(tape: Tp<T>, a: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let data: Vec<T> = a
        .data()
        .iter()
        .map(|&x| half * x * (T::one() + (x * inv_sqrt2).erf()))
        .collect();
    let out = Tensor::new_unchecked(a.shape(), data);
    if wants_grad(tape, &[a]) {
        let (a2, o2) = (a.clone(), out.clone());
        tape.unwrap().record("gelu", &out, move || {
            let Some(d_out) = o2.grad() else { return };
            let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            let d_a: Vec<T> = {
                let xd = a2.data();
                xd.iter()
                    .zip(&d_out)
                    .map(|(&x, &g)| {
                        let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                        let pdf = (-(x * x) * half).exp() * inv_sqrt_2pi;
                        g * (cdf + x * pdf)
                    })
                    .collect()
            };
            a2.accumulate_grad(&d_a);
        });
    }
    Ok(out)
}

/// Inverted dropout. `rate == 0` is the identity; callers skip the op
/// entirely in evaluation mode.
pub fn dropout<T: Scalar>(
    tape: Tp<T>,
    a: &Tensor<T>,
    rate: f64,
    rng: &mut impl Rng,
) -> Result<Tensor<T>, TensorError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::Invalid {
            op: "dropout",
            msg: format!("rate {rate} outside [0, 1)"),
        });
    }
    if rate == 0.0 {
        return Ok(a.clone());
    }
    let keep_scale = T::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..a.numel())
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep_scale
            }
        })
        .collect();
    let data: Vec<T> = a.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    let out = Tensor::new_unchecked(a.shape(), data);
    if wants_grad(tape, &[a]) {
        let (a2, o2) = (a.clone(), out.clone());
        tape.unwrap().record("dropout", &out, move || {
            if let Some(d_out) = o2.grad() {
                let d_a: Vec<T> = d_out.iter().zip(&mask).map(|(&g, &m)| g * m).collect();
                a2.accumulate_grad(&d_a);
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// lookups and reductions
// ---------------------------------------------------------------------------

/// Row lookup into a `[V, E]` table; backward scatter-adds into the table.
pub fn embedding_lookup<T: Scalar>(
    tape: Tp<T>,
    table: &Tensor<T>,
    ids: &[usize],
    ids_shape: &[usize],
) -> Result<Tensor<T>, TensorError> {
    let t_shape = table.shape();
    if t_shape.len() != 2 {
        return Err(TensorError::Invalid {
            op: "embedding_lookup",
            msg: format!("table must be rank 2, got {t_shape:?}"),
        });
    }
    if ids.len() != numel(ids_shape) {
        return Err(TensorError::BadBuffer {
            op: "embedding_lookup",
            actual: numel(ids_shape),
            expected: ids.len(),
            shape: ids_shape.to_vec(),
        });
    }
    let (vocab, dim) = (t_shape[0], t_shape[1]);
    if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
        return Err(TensorError::IndexOutOfRange {
            op: "embedding_lookup",
            index: bad,
            bound: vocab,
        });
    }
    let mut data = Vec::with_capacity(ids.len() * dim);
    {
        let td = table.data();
        for &id in ids {
            data.extend_from_slice(&td[id * dim..(id + 1) * dim]);
        }
    }
    let mut out_shape = ids_shape.to_vec();
    out_shape.push(dim);
    let out = Tensor::new_unchecked(out_shape, data);
    if wants_grad(tape, &[table]) {
        let (t2, o2) = (table.clone(), out.clone());
        let ids: Vec<usize> = ids.to_vec();
        tape.unwrap().record("embedding_lookup", &out, move || {
            if let Some(d_out) = o2.grad() {
                let mut d_table = vec![T::zero(); vocab * dim];
                for (row, &id) in ids.iter().enumerate() {
                    let src = &d_out[row * dim..(row + 1) * dim];
                    let dst = &mut d_table[id * dim..(id + 1) * dim];
                    for (d, &g) in dst.iter_mut().zip(src) {
                        *d += g;
                    }
                }
                t2.accumulate_grad(&d_table);
            }
        });
    }
    Ok(out)
}

pub fn sum<T: Scalar>(tape: Tp<T>, a: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let total = a.data().iter().fold(T::zero(), |acc, &x| acc + x);
    let out = Tensor::new_unchecked(vec![], vec![total]);
    if wants_grad(tape, &[a]) {
        let (a2, o2) = (a.clone(), out.clone());
        tape.unwrap().record("sum", &out, move || {
            if let Some(d_out) = o2.grad() {
                a2.accumulate_grad(&vec![d_out[0]; a2.numel()]);
            }
        });
    }
    Ok(out)
}

pub fn mean<T: Scalar>(tape: Tp<T>, a: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let n = a.numel();
    if n == 0 {
        return Err(TensorError::Invalid {
            op: "mean",
            msg: "empty tensor".into(),
        });
    }
    let inv = T::one() / T::from_usize(n);
    let total = a.data().iter().fold(T::zero(), |acc, &x| acc + x) * inv;
    let out = Tensor::new_unchecked(vec![], vec![total]);
    if wants_grad(tape, &[a]) {
        let (a2, o2) = (a.clone(), out.clone());
        tape.unwrap().record("mean", &out, move || {
            if let Some(d_out) = o2.grad() {
                a2.accumulate_grad(&vec![d_out[0] * inv; a2.numel()]);
            }
        });
    }
    Ok(out)
}

/// Mean over axis 1 of `[B, L, H]`, weighted by a 0/1 position mask, divided
/// by the true kept count per batch row.
pub fn masked_mean_pool<T: Scalar>(
    tape: Tp<T>,
    x: &Tensor<T>,
    mask: &[u8],
) -> Result<Tensor<T>, TensorError> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(TensorError::Invalid {
            op: "masked_mean_pool",
            msg: format!("expected [B, L, H], got {shape:?}"),
        });
    }
    let (b, l, h) = (shape[0], shape[1], shape[2]);
    if mask.len() != b * l {
        return Err(TensorError::BadBuffer {
            op: "masked_mean_pool",
            actual: b * l,
            expected: mask.len(),
            shape: vec![b, l],
        });
    }
    let mut counts = vec![T::zero(); b];
    for (bi, row) in mask.chunks(l).enumerate() {
        let c = row.iter().filter(|&&m| m != 0).count();
        if c == 0 {
            return Err(TensorError::Invalid {
                op: "masked_mean_pool",
                msg: format!("batch row {bi} has no unmasked positions"),
            });
        }
        counts[bi] = T::from_usize(c);
    }
    let mut data = vec![T::zero(); b * h];
    {
        let xd = x.data();
        for bi in 0..b {
            let dst = &mut data[bi * h..(bi + 1) * h];
            for li in 0..l {
                if mask[bi * l + li] != 0 {
                    let src = &xd[(bi * l + li) * h..(bi * l + li + 1) * h];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
            for d in dst.iter_mut() {
                *d /= counts[bi];
            }
        }
    }
    let out = Tensor::new_unchecked(vec![b, h], data);
    if wants_grad(tape, &[x]) {
        let (x2, o2) = (x.clone(), out.clone());
        let mask = mask.to_vec();
        tape.unwrap().record("masked_mean_pool", &out, move || {
            if let Some(d_out) = o2.grad() {
                let mut d_x = vec![T::zero(); b * l * h];
                for bi in 0..b {
                    let g = &d_out[bi * h..(bi + 1) * h];
                    for li in 0..l {
                        if mask[bi * l + li] != 0 {
                            let dst = &mut d_x[(bi * l + li) * h..(bi * l + li + 1) * h];
                            for (d, &gv) in dst.iter_mut().zip(g) {
                                *d = gv / counts[bi];
                            }
                        }
                    }
                }
                x2.accumulate_grad(&d_x);
            }
        });
    }
    Ok(out)
}

/// `x[:, 0, :]` of a `[B, L, H]` tensor (first-position pooling).
pub fn first_position<T: Scalar>(tape: Tp<T>, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(TensorError::Invalid {
            op: "first_position",
            msg: format!("expected [B, L, H], got {shape:?}"),
        });
    }
    let (b, l, h) = (shape[0], shape[1], shape[2]);
    let mut data = Vec::with_capacity(b * h);
    {
        let xd = x.data();
        for bi in 0..b {
            data.extend_from_slice(&xd[bi * l * h..bi * l * h + h]);
        }
    }
    let out = Tensor::new_unchecked(vec![b, h], data);
    if wants_grad(tape, &[x]) {
        let (x2, o2) = (x.clone(), out.clone());
        tape.unwrap().record("first_position", &out, move || {
            if let Some(d_out) = o2.grad() {
                let mut d_x = vec![T::zero(); b * l * h];
                for bi in 0..b {
                    d_x[bi * l * h..bi * l * h + h].copy_from_slice(&d_out[bi * h..(bi + 1) * h]);
                }
                x2.accumulate_grad(&d_x);
            }
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Mean negative log-softmax over positions whose target is not
/// `ignore_index`. Logits are `[N, V]`.
pub fn cross_entropy_from_logits<T: Scalar>(
    tape: Tp<T>,
    logits: &Tensor<T>,
    targets: &[usize],
    ignore_index: usize,
) -> Result<Tensor<T>, TensorError> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(TensorError::Invalid {
            op: "cross_entropy_from_logits",
            msg: format!("logits must be [N, V], got {shape:?}"),
        });
    }
    let (n, v) = (shape[0], shape[1]);
    if targets.len() != n {
        return Err(TensorError::Invalid {
            op: "cross_entropy_from_logits",
            msg: format!("{} targets for {n} rows", targets.len()),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t != ignore_index && t >= v) {
        return Err(TensorError::IndexOutOfRange {
            op: "cross_entropy_from_logits",
            index: bad,
            bound: v,
        });
    }
    let n_valid = targets.iter().filter(|&&t| t != ignore_index).count();
    if n_valid == 0 {
        return Err(TensorError::NoLossPositions {
            op: "cross_entropy_from_logits",
        });
    }
    let row_loss = |row: &[T], t: usize| -> T {
        let mut mx = T::neg_infinity();
        for &x in row {
            if x > mx {
                mx = x;
            }
        }
        let mut sum = T::zero();
        for &x in row {
            sum += (x - mx).exp();
        }
        mx + sum.ln() - row[t]
    };
    let total = {
        let ld = logits.data();
        let losses: Vec<T> = if n * v > PAR_ELEMS {
            ld.par_chunks(v)
                .zip(targets.par_iter())
                .map(|(row, &t)| if t == ignore_index { T::zero() } else { row_loss(row, t) })
                .collect()
        } else {
            ld.chunks(v)
                .zip(targets.iter())
                .map(|(row, &t)| if t == ignore_index { T::zero() } else { row_loss(row, t) })
                .collect()
        };
        losses.iter().fold(T::zero(), |acc, &x| acc + x) / T::from_usize(n_valid)
    };
    let out = Tensor::new_unchecked(vec![], vec![total]);
    if wants_grad(tape, &[logits]) {
        let (l2, o2) = (logits.clone(), out.clone());
        let targets = targets.to_vec();
        tape.unwrap().record("cross_entropy_from_logits", &out, move || {
            let Some(d_out) = o2.grad() else { return };
            let g = d_out[0] / T::from_usize(n_valid);
            let d_logits = {
                let ld = l2.data();
                let mut d = vec![T::zero(); ld.len()];
                let body = |(d_row, (row, &t)): (&mut [T], (&[T], &usize))| {
                    if t == ignore_index {
                        return;
                    }
                    let mut mx = T::neg_infinity();
                    for &x in row {
                        if x > mx {
                            mx = x;
                        }
                    }
                    let mut sum = T::zero();
                    for (o, &x) in d_row.iter_mut().zip(row) {
                        let e = (x - mx).exp();
                        *o = e;
                        sum += e;
                    }
                    for o in d_row.iter_mut() {
                        *o = *o / sum * g;
                    }
                    d_row[t] -= g;
                };
                if d.len() > PAR_ELEMS {
                    d.par_chunks_mut(v)
                        .zip(ld.par_chunks(v).zip(targets.par_iter()))
                        .for_each(body);
                } else {
                    d.chunks_mut(v)
                        .zip(ld.chunks(v).zip(targets.iter()))
                        .for_each(body);
                }
                d
            };
            l2.accumulate_grad(&d_logits);
        });
    }
    Ok(out)
}

/// Mean sigmoid binary cross-entropy over masked positions, in the stable
/// log-sum-exp form. Labels are 0/1 and receive no gradient.
pub fn binary_cross_entropy_from_logits<T: Scalar>(
    tape: Tp<T>,
    logits: &Tensor<T>,
    labels: &Tensor<T>,
    mask: &[bool],
) -> Result<Tensor<T>, TensorError> {
    if logits.shape() != labels.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "binary_cross_entropy_from_logits",
            lhs: logits.shape(),
            rhs: labels.shape(),
        });
    }
    if mask.len() != logits.numel() {
        return Err(TensorError::BadBuffer {
            op: "binary_cross_entropy_from_logits",
            actual: logits.numel(),
            expected: mask.len(),
            shape: logits.shape(),
        });
    }
    let n_valid = mask.iter().filter(|&&m| m).count();
    if n_valid == 0 {
        return Err(TensorError::NoLossPositions {
            op: "binary_cross_entropy_from_logits",
        });
    }
    let total = {
        let xd = logits.data();
        let zd = labels.data();
        let mut acc = T::zero();
        for i in 0..xd.len() {
            if mask[i] {
                let x = xd[i];
                let z = zd[i];
                // max(x, 0) - x * z + ln(1 + exp(-|x|))
                acc += x.max(T::zero()) - x * z + (-x.abs()).exp().ln_1p();
            }
        }
        acc / T::from_usize(n_valid)
    };
    let out = Tensor::new_unchecked(vec![], vec![total]);
    if wants_grad(tape, &[logits]) {
        let (x2, z2, o2) = (logits.clone(), labels.clone(), out.clone());
        let mask = mask.to_vec();
        tape.unwrap()
            .record("binary_cross_entropy_from_logits", &out, move || {
                let Some(d_out) = o2.grad() else { return };
                let g = d_out[0] / T::from_usize(n_valid);
                let d_x: Vec<T> = {
                    let xd = x2.data();
                    let zd = z2.data();
                    xd.iter()
                        .zip(zd.iter())
                        .zip(&mask)
                        .map(|((&x, &z), &m)| {
                            if m {
                                let sig = T::one() / (T::one() + (-x).exp());
                                (sig - z) * g
                            } else {
                                T::zero()
                            }
                        })
                        .collect()
                };
                x2.accumulate_grad(&d_x);
            });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let eye = t64(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let m = t64(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let out = matmul(None, &eye, &m).unwrap();
        assert_eq!(out.to_vec(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_case_1x2_2x1() {
        let a = t64(vec![1, 2], vec![1.0, 2.0]);
        let b = t64(vec![2, 1], vec![3.0, 4.0]);
        let out = matmul(None, &a, &b).unwrap();
        assert_eq!(out.shape(), vec![1, 1]);
        assert_eq!(out.to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t64(vec![2, 3], vec![0.0; 6]);
        let b = t64(vec![4, 2], vec![0.0; 8]);
        let err = matmul(None, &a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let x = t64(vec![2], vec![0.0, 0.0]);
        let y = softmax(None, &x, 0).unwrap();
        assert_eq!(y.to_vec(), vec![0.5, 0.5]);

        let x = t64(vec![2], vec![1000.0, 0.0]);
        let y = softmax(None, &x, 0).unwrap();
        let v = y.to_vec();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
        assert!(v.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one_on_inner_axis() {
        let x = t64(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]);
        let y = softmax(None, &x, 1).unwrap();
        for row in y.to_vec().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // axis 0 goes through the permute path
        let y0 = softmax(None, &x, 0).unwrap();
        let v = y0.to_vec();
        for c in 0..3 {
            assert!((v[c] + v[3 + c] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = t64(vec![4], vec![7.0; 4]);
        let gain = t64(vec![4], vec![1.0; 4]);
        let bias = t64(vec![4], vec![0.0; 4]);
        let y = layer_norm(None, &x, &gain, &bias, 1e-12).unwrap();
        assert!(y.to_vec().iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn layer_norm_two_point_standardization() {
        let x = t64(vec![2], vec![1.0, 3.0]);
        let gain = t64(vec![2], vec![1.0; 2]);
        let bias = t64(vec![2], vec![0.0; 2]);
        let y = layer_norm(None, &x, &gain, &bias, 1e-14).unwrap();
        let v = y.to_vec();
        assert!((v[0] + 1.0).abs() < 1e-6 && (v[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_reference_points() {
        let x = t64(vec![3], vec![0.0, 10.0, -10.0]);
        let y = gelu(None, &x).unwrap().to_vec();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 10.0).abs() < 1e-6);
        assert!(y[2].abs() < 1e-6);
    }

    #[test]
    fn gelu_derivative_at_zero_is_half() {
        let tape = Tape::new();
        let x = Tensor::<f64>::scalar(0.0).requires_grad();
        let y = gelu(Some(&tape), &x).unwrap();
        tape.backward(&y).unwrap();
        assert!((x.grad().unwrap()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let logits = t64(vec![2, 4], vec![0.3; 8]);
        let loss = cross_entropy_from_logits(None, &logits, &[1, 3], usize::MAX).unwrap();
        assert!((loss.item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_one_hot_margin_goes_to_zero() {
        let logits = t64(vec![1, 4], vec![0.0, 100.0, 0.0, 0.0]);
        let loss = cross_entropy_from_logits(None, &logits, &[1], usize::MAX).unwrap();
        assert!(loss.item() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_ignored_is_error() {
        let logits = t64(vec![2, 4], vec![0.0; 8]);
        let err = cross_entropy_from_logits(None, &logits, &[9, 9], 9).unwrap_err();
        assert!(matches!(err, TensorError::NoLossPositions { .. }));
    }

    #[test]
    fn bce_reference_points() {
        let big = t64(vec![1], vec![50.0]);
        let one = t64(vec![1], vec![1.0]);
        let loss = binary_cross_entropy_from_logits(None, &big, &one, &[true]).unwrap();
        assert!(loss.item() < 1e-12);

        let zero_logit = t64(vec![1], vec![0.0]);
        let loss = binary_cross_entropy_from_logits(None, &zero_logit, &one, &[true]).unwrap();
        assert!((loss.item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bce_gradient_at_zero_logit_label_one() {
        let tape = Tape::new();
        let x = t64(vec![1], vec![0.0]).requires_grad();
        let z = t64(vec![1], vec![1.0]);
        let loss = binary_cross_entropy_from_logits(Some(&tape), &x, &z, &[true]).unwrap();
        tape.backward(&loss).unwrap();
        assert!((x.grad().unwrap()[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn bce_empty_mask_is_error() {
        let x = t64(vec![2], vec![0.0, 0.0]);
        let z = t64(vec![2], vec![1.0, 0.0]);
        let err = binary_cross_entropy_from_logits(None, &x, &z, &[false, false]).unwrap_err();
        assert!(matches!(err, TensorError::NoLossPositions { .. }));
    }

    #[test]
    fn embedding_lookup_row_zero() {
        let table = t64(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = embedding_lookup(None, &table, &[0], &[1]).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0]);
        let err = embedding_lookup(None, &table, &[3], &[1]).unwrap_err();
        assert!(matches!(err, TensorError::IndexOutOfRange { .. }));
    }

    #[test]
    fn embedding_shared_row_accumulates_both_gradients() {
        let tape = Tape::new();
        let table = t64(vec![3, 2], vec![0.0; 6]).requires_grad();
        let rows = embedding_lookup(Some(&tape), &table, &[1, 1], &[2]).unwrap();
        let loss = sum(Some(&tape), &rows).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(table.grad().unwrap(), vec![0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let x = t64(vec![3], vec![1.0, 2.0, 3.0]);
        let y = dropout(None, &x, 0.0, &mut rng).unwrap();
        assert!(y.same_storage(&x));
    }

    #[test]
    fn dropout_backward_uses_recorded_mask() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let x = t64(vec![64], vec![1.0; 64]).requires_grad();
        let y = dropout(Some(&tape), &x, 0.5, &mut rng).unwrap();
        let loss = sum(Some(&tape), &y).unwrap();
        tape.backward(&loss).unwrap();
        let g = x.grad().unwrap();
        let fwd = y.to_vec();
        // gradient equals the applied mask exactly
        assert_eq!(g, fwd);
        assert!(g.iter().any(|&v| v == 0.0) && g.iter().any(|&v| v == 2.0));
    }

    #[test]
    fn masked_pool_ignores_padding() {
        let x = t64(vec![1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 100.0, 100.0]);
        let y = masked_mean_pool(None, &x, &[1, 1, 0]).unwrap();
        assert_eq!(y.to_vec(), vec![2.0, 3.0]);
    }

    #[test]
    fn backward_of_sum_of_losses_is_sum_of_backwards() {
        let xs = vec![0.3, -1.2, 2.2];
        let make = || t64(vec![3], xs.clone()).requires_grad();

        // combined
        let x = make();
        let tape = Tape::new();
        let l1 = mean(Some(&tape), &mul(Some(&tape), &x, &x).unwrap()).unwrap();
        let l2 = sum(Some(&tape), &gelu(Some(&tape), &x).unwrap()).unwrap();
        let total = add(Some(&tape), &l1, &l2).unwrap();
        tape.backward(&total).unwrap();
        let combined = x.grad().unwrap();

        // separate backwards accumulate into the same grad
        let x = make();
        let tape = Tape::new();
        let l1 = mean(Some(&tape), &mul(Some(&tape), &x, &x).unwrap()).unwrap();
        tape.backward(&l1).unwrap();
        let tape = Tape::new();
        let l2 = sum(Some(&tape), &gelu(Some(&tape), &x).unwrap()).unwrap();
        tape.backward(&l2).unwrap();
        let separate = x.grad().unwrap();

        assert_eq!(combined, separate);
    }

    #[test]
    fn broadcast_add_reduces_bias_grad() {
        let tape = Tape::new();
        let x = t64(vec![2, 3], vec![0.0; 6]).requires_grad();
        let b = t64(vec![3], vec![0.0; 3]).requires_grad();
        let y = add(Some(&tape), &x, &b).unwrap();
        let loss = sum(Some(&tape), &y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn permute_round_trip_gradient() {
        let tape = Tape::new();
        let x = t64(vec![2, 3], (0..6).map(|v| v as f64).collect()).requires_grad();
        let y = permute(Some(&tape), &x, &[1, 0]).unwrap();
        assert_eq!(y.shape(), vec![3, 2]);
        assert_eq!(y.to_vec(), vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let loss = sum(Some(&tape), &y).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }
}
