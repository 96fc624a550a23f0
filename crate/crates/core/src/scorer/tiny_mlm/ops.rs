//! Dense row-major kernels. Every reduction runs in a fixed order so results
//! are bit-reproducible.

pub const LN_EPS: f64 = 1e-5;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_add(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`
pub fn matmul_bt_add(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(a_row, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_at_add(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators, combined in a fixed order
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Adds `bias` to every row of `x`.
pub fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Column sums of `dy`, accumulated into `db`.
pub fn bias_grad(dy: &[f64], db: &mut [f64]) {
    for row in dy.chunks_exact(db.len()) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
}

pub struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Row-wise layer normalization of `x[rows×d]`.
pub fn layernorm(x: &[f64], gain: &[f64], bias: &[f64], d: usize) -> (Vec<f64>, LnCache) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for j in 0..d {
            let h = (row[j] - mean) * s;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gain[j] + bias[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Backward of [`layernorm`]; accumulates into `dx`, `dgain`, `dbias`.
pub fn layernorm_backward(
    dy: &[f64],
    cache: &LnCache,
    gain: &[f64],
    d: usize,
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) {
    let rows = dy.len() / d;
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dy_row = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgain[j] += dy_row[j] * xh[j];
            dbias[j] += dy_row[j];
            dxhat[j] = dy_row[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let s = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] += s * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Log-sum-exp of the selected entries and their softmax weights.
pub fn logsumexp(values: &[f64]) -> (f64, Vec<f64>) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    (max + total.ln(), exps.iter().map(|e| e / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let mut out = vec![0.0; m * n];
        matmul_add(&a, &b, &mut out, m, k, n);
        let mut out_bt = vec![0.0; m * n];
        matmul_bt_add(&a, &transpose(&b, k, n), &mut out_bt, m, k, n);
        let mut out_at = vec![0.0; m * n];
        matmul_at_add(&transpose(&a, m, k), &b, &mut out_at, k, m, n);
        for i in 0..m * n {
            assert!((out[i] - want[i]).abs() < 1e-12);
            assert!((out_bt[i] - want[i]).abs() < 1e-12);
            assert!((out_at[i] - want[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layernorm_rows_are_standardized() {
        let x = [1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0];
        let (y, _) = layernorm(&x, &[1.0; 4], &[0.0; 4], 4);
        for row in y.chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
    }
}
