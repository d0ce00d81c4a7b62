//! Forward kernels on plain tensors. The autodiff graph calls these and adds
//! the matching backward rules.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Coefficient of the cubic term in the tanh form of GELU.
pub const GELU_CUBIC: f64 = 0.044715;

/// `out[m×n] (+)= a[m×k] · b[k×n]`, row-major slices.
pub(crate) fn gemm<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    for r in 0..m {
        let a_row = &a[r * k..(r + 1) * k];
        let b_row = &b[r * n..(r + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if a.rank() != 2 || b.rank() != 2 || k != k2 {
        return Err(Error::Dimension(format!(
            "matmul {:?} · {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![S::zero(); m * n];
    gemm(m, k, n, a.data(), b.data(), &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a · bᵀ` for two matrices with the same column count.
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2();
    let (n, k2) = b.dims2();
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_nt {:?} · {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![S::zero(); m * n];
    gemm_nt(m, k, n, a.data(), b.data(), &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let (m, n) = a.dims2();
    let src = a.data();
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

pub fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (m, n) = x.dims2();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n.max(1)).take(m) {
        softmax_in_place(row);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn log_softmax_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (m, n) = x.dims2();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n.max(1)).take(m) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Normalized rows and per-row inverse standard deviations, kept for backward.
pub(crate) struct NormStats<S> {
    pub xhat: Vec<S>,
    pub inv_std: Vec<S>,
}

pub(crate) fn layer_norm_stats<S: Scalar>(x: &Tensor<S>, eps: S) -> NormStats<S> {
    let (m, d) = x.dims2();
    let dn = S::from_usize(d).unwrap();
    let mut xhat = Vec::with_capacity(m * d);
    let mut inv_std = Vec::with_capacity(m);
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<S>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
        let inv = S::one() / (var + eps).sqrt();
        xhat.extend(row.iter().map(|&v| (v - mean) * inv));
        inv_std.push(inv);
    }
    NormStats { xhat, inv_std }
}

pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Result<Tensor<S>> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Dimension(format!(
            "layer_norm width {d} with gamma {:?} beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let stats = layer_norm_stats(x, eps);
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        affine_rows(&stats.xhat, d, gamma.data(), beta.data()),
    ))
}

pub(crate) fn affine_rows<S: Scalar>(xhat: &[S], d: usize, gamma: &[S], beta: &[S]) -> Vec<S> {
    xhat.chunks(d)
        .flat_map(|row| {
            row.iter()
                .zip(gamma)
                .zip(beta)
                .map(|((&h, &g), &b)| h * g + b)
        })
        .collect()
}

#[inline]
pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let a = S::of(GELU_CUBIC);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    let a = S::of(GELU_CUBIC);
    let half = S::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * a * x * x)
}

pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(gelu_scalar)
}

/// Rows scaled to unit Euclidean norm.
pub fn l2_normalize_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (_, n) = x.dims2();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n.max(1)) {
        let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Mean over consecutive blocks of `seg` rows: `[b·seg × d] → [b × d]`.
pub fn segment_mean<S: Scalar>(x: &Tensor<S>, seg: usize) -> Result<Tensor<S>> {
    let (m, d) = x.dims2();
    if seg == 0 || m % seg != 0 {
        return Err(Error::Dimension(format!("{m} rows not divisible into segments of {seg}")));
    }
    let b = m / seg;
    let inv = S::one() / S::from_usize(seg).unwrap();
    let mut out = vec![S::zero(); b * d];
    for (i, row) in x.data().chunks(d).enumerate() {
        let dst = &mut out[(i / seg) * d..(i / seg + 1) * d];
        for (o, &v) in dst.iter_mut().zip(row) {
            *o += v;
        }
    }
    for v in &mut out {
        *v *= inv;
    }
    Ok(Tensor::from_parts(vec![b, d], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let i2 = Tensor::<f64>::eye(2);
        assert_eq!(matmul(&i2, &i2).unwrap(), i2);
        assert_eq!(matmul(&t(&[&[2.0]]), &t(&[&[3.0]])).unwrap(), t(&[&[6.0]]));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let err = matmul(&a, &a).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn softmax_symmetric_and_shift_invariant() {
        let s = softmax_rows(&t(&[&[0.0, 0.0], &[7.5, 7.5]]));
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
        for c in [-1e3, -2.0, 0.0, 3.0, 1e3] {
            let s = softmax_rows(&t(&[&[c, c, c]]));
            for &v in s.data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = t(&[&[3.0, 3.0, 3.0, 3.0]]);
        let y = layer_norm(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_keeps_normalized_row() {
        let x = t(&[&[1.0, -1.0]]);
        let y = layer_norm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-300).unwrap();
        assert!((y.at(0, 0) - 1.0).abs() < 1e-12 && (y.at(0, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn segment_mean_averages_blocks() {
        let x = t(&[&[1.0, 2.0], &[3.0, 4.0], &[10.0, 10.0], &[20.0, 30.0]]);
        let y = segment_mean(&x, 2).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0, 15.0, 20.0]);
        assert!(segment_mean(&x, 3).is_err());
    }
}
