//! Eager kernels shared by the autodiff tape and the cached inference path.

use std::cell::Cell;

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Per-thread tally of matrix-product work.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub matmul_calls: u64,
    /// Sum of left-operand (output) row counts over all products.
    pub matmul_rows: u64,
    pub macs: u64,
}

thread_local! {
    static COUNTS: Cell<OpCounts> = const { Cell::new(OpCounts { matmul_calls: 0, matmul_rows: 0, macs: 0 }) };
}

fn tally(m: usize, k: usize, n: usize) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.matmul_calls += 1;
        v.matmul_rows += m as u64;
        v.macs += (m * k * n) as u64;
        c.set(v);
    });
}

pub fn op_counts() -> OpCounts {
    COUNTS.with(Cell::get)
}

pub fn reset_op_counts() {
    COUNTS.with(|c| c.set(OpCounts::default()));
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.expect_matrix("matmul lhs")?;
    let (k2, n) = b.expect_matrix("matmul rhs")?;
    if k != k2 {
        return Err(shape_err!("matmul {m}x{k} by {k2}x{n}"));
    }
    tally(m, k, n);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::ZERO; m * n];
    for (orow, arow) in out.chunks_exact_mut(n.max(1)).zip(ad.chunks_exact(k.max(1))) {
        for (&av, brow) in arow.iter().zip(bd.chunks_exact(n.max(1))) {
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.expect_matrix("matmul_nt lhs")?;
    let (n, k2) = b.expect_matrix("matmul_nt rhs")?;
    if k != k2 {
        return Err(shape_err!("matmul_nt {m}x{k} by ({n}x{k2})ᵀ"));
    }
    matmul(a, &transpose(b)?)
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.expect_matrix("matmul_tn lhs")?;
    let (k2, n) = b.expect_matrix("matmul_tn rhs")?;
    if k != k2 {
        return Err(shape_err!("matmul_tn ({k}x{m})ᵀ by {k2}x{n}"));
    }
    tally(m, k, n);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::ZERO; m * n];
    for (arow, brow) in ad.chunks_exact(m.max(1)).zip(bd.chunks_exact(n.max(1))) {
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(n.max(1))) {
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.expect_matrix("transpose")?;
    let d = a.data();
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if !a.same_shape(b) {
        return Err(shape_err!("add {:?} + {:?}", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if !a.same_shape(b) {
        return Err(shape_err!("mul {:?} * {:?}", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn scale<T: Real>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|x| x * s)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

pub fn silu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

/// Row statistics saved by the normalization kernels for the backward pass.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Per-row `(x − μ)/sqrt(σ² + eps) · gamma + beta` with the biased variance.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let (n, d) = x.expect_matrix("layer_norm")?;
    if gamma.len() != d || beta.len() != d {
        return Err(shape_err!("layer_norm affine of {}/{} for width {d}", gamma.len(), beta.len()));
    }
    let dn = T::from_usize(d);
    let mut out = vec![T::ZERO; n * d];
    let mut mean = Vec::with_capacity(n);
    let mut rstd = Vec::with_capacity(n);
    for (r, orow) in out.chunks_exact_mut(d).enumerate() {
        let row = x.row(r);
        let mu = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
        let rs = T::ONE / (var + eps).sqrt();
        for (j, o) in orow.iter_mut().enumerate() {
            *o = (row[j] - mu) * rs * gamma.data()[j] + beta.data()[j];
        }
        mean.push(mu);
        rstd.push(rs);
    }
    Ok((Tensor::new(vec![n, d], out)?, NormStats { mean, rstd }))
}

/// Per-row `x / sqrt(mean(x²) + eps) · gamma`.
pub fn rms_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, eps: T) -> Result<(Tensor<T>, NormStats<T>)> {
    let (n, d) = x.expect_matrix("rms_norm")?;
    if gamma.len() != d {
        return Err(shape_err!("rms_norm gain of {} for width {d}", gamma.len()));
    }
    let dn = T::from_usize(d);
    let mut out = vec![T::ZERO; n * d];
    let mut rstd = Vec::with_capacity(n);
    for (r, orow) in out.chunks_exact_mut(d).enumerate() {
        let row = x.row(r);
        let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
        let rs = T::ONE / (ms + eps).sqrt();
        for (j, o) in orow.iter_mut().enumerate() {
            *o = row[j] * rs * gamma.data()[j];
        }
        rstd.push(rs);
    }
    Ok((
        Tensor::new(vec![n, d], out)?,
        NormStats {
            mean: vec![T::ZERO; n],
            rstd,
        },
    ))
}

/// Row-wise softmax over allowed cells only. `allowed` is row-major with the
/// same extents as `scores`; disallowed cells come out exactly zero, which is
/// what adding −∞ before the exponent produces.
pub fn masked_softmax<T: Real>(scores: &Tensor<T>, allowed: &[bool]) -> Result<Tensor<T>> {
    let (rows, cols) = scores.expect_matrix("masked_softmax")?;
    if allowed.len() != rows * cols {
        return Err(shape_err!(
            "mask of {} cells for {rows}x{cols} scores",
            allowed.len()
        ));
    }
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        let srow = scores.row(r);
        let arow = &allowed[r * cols..(r + 1) * cols];
        let mut max: Option<T> = None;
        for (&s, &a) in srow.iter().zip(arow) {
            if a {
                max = Some(match max {
                    Some(m) if m >= s => m,
                    _ => s,
                });
            }
        }
        let max = max.ok_or(Error::DegenerateRow { row: r })?;
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut total = T::ZERO;
        for ((o, &s), &a) in orow.iter_mut().zip(srow).zip(arow) {
            if a {
                *o = (s - max).exp();
                total += *o;
            }
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    Tensor::new(vec![rows, cols], out)
}

/// Rotates consecutive pairs `(2k, 2k+1)` of each row by `pos · theta^(−2k/dh)`.
/// `inverse` applies the transposed rotation (used for gradients).
pub fn rope<T: Real>(x: &Tensor<T>, positions: &[usize], theta: f64, inverse: bool) -> Result<Tensor<T>> {
    let (n, dh) = x.expect_matrix("rope")?;
    if dh % 2 != 0 {
        return Err(Error::Config(format!("rotary embedding needs an even head width, got {dh}")));
    }
    if positions.len() != n {
        return Err(shape_err!("rope: {} positions for {n} rows", positions.len()));
    }
    let mut out = x.clone();
    let sign = if inverse { -1.0 } else { 1.0 };
    for (r, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for k in 0..dh / 2 {
            let freq = theta.powf(-2.0 * k as f64 / dh as f64);
            let angle = sign * pos as f64 * freq;
            let (s, c) = (T::from_f64(angle.sin()), T::from_f64(angle.cos()));
            let (a, b) = (row[2 * k], row[2 * k + 1]);
            row[2 * k] = a * c - b * s;
            row[2 * k + 1] = a * s + b * c;
        }
    }
    Ok(out)
}

/// Horizontal concatenation of matrices with equal row counts.
pub fn concat_cols<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let rows = parts.first().map_or(0, |p| p.rows());
    let mut cols = 0;
    for p in parts {
        let (r, c) = p.expect_matrix("concat_cols")?;
        if r != rows {
            return Err(shape_err!("concat_cols: {r} rows vs {rows}"));
        }
        cols += c;
    }
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::new(vec![rows, cols], data)
}

/// Picks rows of an embedding table.
pub fn gather_rows<T: Real>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    table.select_rows(ids)
}

/// `log Σ exp(row)`, stable.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(row[0], T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}
