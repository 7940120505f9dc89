// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense kernels shared by the batched and incremental paths.

pub(crate) const NORM_EPS: f64 = 1e-6;
pub(crate) const ROPE_BASE: f64 = 10_000.0;

/// Row-major `C (m×n) = op(A) · op(B)` (+ `C` when `accumulate`).
/// `ta`: `A` is stored `k×m`. `tb`: `B` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// RMSNorm over rows of width `d`. Returns `(y, xn, inv_rms)` where
/// `xn = x · inv_rms` and `y = xn ⊙ g`.
pub(crate) fn rmsnorm(x: &[f64], g: &[f64], d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xn = vec![0.0; x.len()];
    let mut inv = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + NORM_EPS).sqrt();
        inv[i] = r;
        for j in 0..d {
            xn[i * d + j] = row[j] * r;
            y[i * d + j] = xn[i * d + j] * g[j];
        }
    }
    (y, xn, inv)
}

/// Backward of [`rmsnorm`]: accumulates `dg` and returns `dx`.
pub(crate) fn rmsnorm_backward(dy: &[f64], xn: &[f64], inv: &[f64], g: &[f64], dg: &mut [f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dy.len()];
    for (i, &r) in inv.iter().enumerate() {
        let o = i * d;
        let mut dot = 0.0;
        for j in 0..d {
            dg[j] += dy[o + j] * xn[o + j];
            dot += dy[o + j] * g[j] * xn[o + j];
        }
        let dot = dot / d as f64;
        for j in 0..d {
            dx[o + j] = r * (dy[o + j] * g[j] - xn[o + j] * dot);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// Rotate consecutive pairs of every head in one row of width `d` by the
/// angles of position `pos`. `sign = -1` applies the inverse rotation.
pub(crate) fn rope_row(row: &mut [f64], pos: usize, head_dim: usize, sign: f64) {
    let half = head_dim / 2;
    for i in 0..half {
        let freq = ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
        let (s, c) = (pos as f64 * freq).sin_cos();
        let s = sign * s;
        for head in row.chunks_exact_mut(head_dim) {
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * c - b * s;
            head[2 * i + 1] = a * s + b * c;
        }
    }
}

/// In-place softmax; returns log of the normaliser (max + log-sum-exp).
pub(crate) fn softmax_in_place(x: &mut [f64]) -> f64 {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in x.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in x.iter_mut() {
        *v /= s;
    }
    mx + s.ln()
}

/// Log-sum-exp of a logit row.
pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + x.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_in_all_layouts() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let naive = |i: usize, j: usize| (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum::<f64>();
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![1.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, true);
                for i in 0..m {
                    for j in 0..n {
                        assert!((c[i * n + j] - 1.0 - naive(i, j)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn rope_inverse_and_norm() {
        let mut row: Vec<f64> = (0..16).map(|i| i as f64 - 7.5).collect();
        let orig = row.clone();
        rope_row(&mut row, 37, 8, 1.0);
        let n0: f64 = orig.iter().map(|x| x * x).sum();
        let n1: f64 = row.iter().map(|x| x * x).sum();
        assert!((n0 - n1).abs() < 1e-9);
        rope_row(&mut row, 37, 8, -1.0);
        for (a, b) in row.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &u in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }
}
