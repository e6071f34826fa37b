//! Dense kernels shared by the autodiff graph and the eager inference path.

use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;

/// Additive sentinel for a masked attention entry.
pub const MASK_VALUE: f64 = -1e9;

/// Entries at or below this value count as masked when deciding whether a
/// softmax row is fully masked.
pub const MASK_THRESHOLD: f64 = -1e8;

/// Strided `C = A·B + beta·C` for row-major views, backed by `matrixmultiply`.
///
/// `a` is `m×k` with strides `(rsa, csa)`, `b` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len(), "gemm: A view out of bounds");
        assert!(last(k, n, rsb, csb) < b.len(), "gemm: B view out of bounds");
    }
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: C view out of bounds");
    // SAFETY: every element addressed by the three strided views lies inside
    // its slice (checked above), and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `a[m,k] · b[k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, k, 1, b, n, 1, 0.0, &mut c, n, 1);
    c
}

/// `c[m,n] += aᵀ · b` with `a[k,m]`, `b[k,n]`.
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, c: &mut [f64]) {
    gemm(m, k, n, a, 1, m, b, n, 1, 1.0, c, n, 1);
}

/// `c[m,k] += a · bᵀ` with `a[m,n]`, `b[k,n]`.
pub fn matmul_a_bt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, c: &mut [f64]) {
    gemm(m, n, k, a, n, 1, b, 1, n, 1.0, c, k, 1);
}

/// Max-subtracted softmax of one row, in place.
///
/// A row whose every entry is at or below [`MASK_THRESHOLD`] becomes all
/// zeros instead of a uniform or NaN distribution.
pub fn softmax_row_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > MASK_THRESHOLD) {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Numerically stable softmax along `axis`.
pub fn stable_softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    ensure!(
        axis < shape.len(),
        Error::AxisOutOfRange {
            axis,
            rank: shape.len()
        }
    );
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (t, b) in buf.iter_mut().enumerate() {
                *b = data[base + t * inner];
            }
            softmax_row_inplace(&mut buf);
            for (t, b) in buf.iter().enumerate() {
                data[base + t * inner] = *b;
            }
        }
    }
    Ok(out)
}

pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer norm; returns `(output, per-row (mean, rstd))`.
pub fn layer_norm(
    x: &[f64],
    cols: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<(f64, f64)>) {
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut stats = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let o = &mut out[r * cols..(r + 1) * cols];
        for c in 0..cols {
            o[c] = (xr[c] - mean) * rstd * gamma[c] + beta[c];
        }
        stats.push((mean, rstd));
    }
    (out, stats)
}
