//! Dense row-major kernels shared by the training and inference paths.

/// `c[m×n] (+)= a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slices are bounds-checked above and strides describe
    // contiguous row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c[m×n] (+)= a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: as in `matmul`; b is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c[k×n] (+)= a[m×k]ᵀ · b[m×n]`.
pub fn matmul_at(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if k == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: as in `matmul`; a is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0,
            a.as_ptr(), 1, k as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `out[n] = x[k] · w[k×n]`, accumulated in a fixed order so that a row's
/// result never depends on what else is being computed.
pub fn vec_mat(x: &[f64], w: &[f64], out: &mut [f64]) {
    let n = out.len();
    debug_assert_eq!(w.len(), x.len() * n);
    out.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

pub fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// RMS normalization of one row with gain; returns `1 / rms`.
pub fn rms_norm_row(x: &[f64], gain: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}

/// Backward of [`rms_norm_row`]: accumulates into `dx` and `dgain`.
pub fn rms_norm_row_backward(x: &[f64], gain: &[f64], inv: f64, dy: &[f64], dx: &mut [f64], dgain: &mut [f64]) {
    let n = x.len() as f64;
    let mut proj = 0.0;
    for i in 0..x.len() {
        let xhat = x[i] * inv;
        dgain[i] += dy[i] * xhat;
        proj += dy[i] * gain[i] * xhat;
    }
    proj /= n;
    for i in 0..x.len() {
        let xhat = x[i] * inv;
        dx[i] += (dy[i] * gain[i] - xhat * proj) * inv;
    }
}

/// Numerically stable `log(sum(exp(x)))`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_match_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let close = |x: &[f64]| x.iter().zip(&want).all(|(p, q)| (p - q).abs() < 1e-12);

        let mut c = vec![0.0; m * n];
        matmul(&a, &b, &mut c, m, k, n, false);
        assert!(close(&c));
        let bt = transpose(&b, k, n);
        matmul_bt(&a, &bt, &mut c, m, k, n, false);
        assert!(close(&c));
        let at = transpose(&a, m, k);
        matmul_at(&at, &b, &mut c, k, m, n, false);
        assert!(close(&c));
        matmul(&a, &b, &mut c, m, k, n, true);
        assert!(c.iter().zip(&want).all(|(p, q)| (p - 2.0 * q).abs() < 1e-12));
        let mut row = vec![0.0; n];
        vec_mat(&a[..k], &b, &mut row);
        assert!(row.iter().zip(&want[..n]).all(|(p, q)| (p - q).abs() < 1e-12));
    }

    #[test]
    fn rms_norm_backward_finite_difference() {
        let x = [0.3, -1.2, 0.7, 2.0];
        let g = [1.1, 0.9, -0.4, 0.5];
        let dy = [0.2, -0.3, 0.5, 1.0];
        let f = |x: &[f64]| {
            let mut o = [0.0; 4];
            rms_norm_row(x, &g, 1e-6, &mut o);
            dot(&o, &dy)
        };
        let mut o = [0.0; 4];
        let inv = rms_norm_row(&x, &g, 1e-6, &mut o);
        let (mut dx, mut dg) = ([0.0; 4], [0.0; 4]);
        rms_norm_row_backward(&x, &g, inv, &dy, &mut dx, &mut dg);
        for i in 0..4 {
            let mut p = x;
            p[i] += 1e-6;
            let mut q = x;
            q[i] -= 1e-6;
            let fd = (f(&p) - f(&q)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-7, "{i}: {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn silu_grad_matches_fd() {
        for z in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let fd = (silu(z + 1e-6) - silu(z - 1e-6)) / 2e-6;
            assert!((fd - silu_grad(z)).abs() < 1e-8);
        }
        assert_eq!(silu(0.0), 0.0);
    }

    #[test]
    fn lse() {
        assert!((log_sum_exp(&[0.0; 4]) - 4f64.ln()).abs() < 1e-15);
        assert!(log_sum_exp(&[1000.0, 1000.0]).is_finite());
    }
}
