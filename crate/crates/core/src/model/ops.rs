//! Dense building blocks with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis};

pub const LN_EPS: f64 = 1e-8;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact-erf GELU: `x * Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `ln σ(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x W + b` with `b` broadcast over rows.
pub fn affine(x: &ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    y += b;
    y
}

pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LayerNormCache) {
    let r = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / r;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / r;
        *s = 1.0 / (var + LN_EPS).sqrt();
        row *= *s;
    }
    let y = &xhat * g + b;
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `dx` and accumulates `dg`, `db`.
pub fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LayerNormCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let r = dy.ncols() as f64;
    let mut dx = dy * g;
    for ((mut row, xh), &s) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let sum = row.sum();
        let dot = row.dot(&xh);
        row.zip_mut_with(&xh, |d, &x| *d = s * (*d - sum / r - x * dot / r));
    }
    dx
}

/// Causal self-attention for one sequence and one head. Key `j` is visible
/// to query `i` iff `j <= i` and `valid[j]`. Rows with no visible key come
/// back as zeros. Returns the output and the attention probabilities.
pub fn masked_attention(
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
    valid: &[bool],
) -> (Array2<f64>, Array2<f64>) {
    let m = q.nrows();
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut probs = q.dot(&k.t());
    for i in 0..m {
        let mut row = probs.row_mut(i);
        let mut max = f64::NEG_INFINITY;
        for j in 0..m {
            if j <= i && valid[j] {
                row[j] *= scale;
                max = max.max(row[j]);
            } else {
                row[j] = f64::NEG_INFINITY;
            }
        }
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row /= sum;
    }
    let out = probs.dot(v);
    (out, probs)
}

/// Backward of [`masked_attention`]; returns `(dq, dk, dv)`.
pub fn masked_attention_backward(
    dout: &ArrayView2<f64>,
    q: &ArrayView2<f64>,
    k: &ArrayView2<f64>,
    v: &ArrayView2<f64>,
    probs: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let dv = probs.t().dot(dout);
    let dp = dout.dot(&v.t());
    let mut ds = probs * &dp;
    for (mut row, p) in ds.rows_mut().into_iter().zip(probs.rows()) {
        let s = row.sum();
        row.zip_mut_with(&p, |d, &pp| *d -= pp * s);
    }
    ds *= scale;
    let dq = ds.dot(k);
    let dk = ds.t().dot(q);
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_at_one() {
        // 1.0 * Φ(1.0)
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
    }

    #[test]
    fn single_position_returns_value_row() {
        let q = array![[0.3, -1.0]];
        let v = array![[2.0, 5.0]];
        let (out, p) = masked_attention(&q.view(), &q.view(), &v.view(), &[true]);
        assert_eq!(p[[0, 0]], 1.0);
        assert_eq!(out, v);
    }

    #[test]
    fn first_position_sees_only_itself() {
        let q = array![[1.0, 0.0], [0.0, 1.0]];
        let k = array![[0.5, 0.5], [3.0, 3.0]];
        let v = array![[1.0, 2.0], [7.0, 9.0]];
        let (out, p) = masked_attention(&q.view(), &k.view(), &v.view(), &[true, true]);
        assert_eq!(p[[0, 1]], 0.0);
        assert_eq!(out.row(0), v.row(0));
        assert!((p.row(1).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let q = array![[1.0], [1.0]];
        let (out, p) = masked_attention(&q.view(), &q.view(), &q.view(), &[false, true]);
        assert_eq!(out[[0, 0]], 0.0);
        assert_eq!(p.row(0).sum(), 0.0);
        assert_eq!(p[[1, 1]], 1.0);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = array![[1.0, 2.0, 3.0, 4.0], [-2.0, 0.0, 0.0, 10.0]];
        let g = Array1::ones(4);
        let b = Array1::zeros(4);
        let (y, _) = layer_norm(&x, &g, &b);
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            assert!((row.iter().map(|v| v * v).sum::<f64>() / 4.0 - 1.0).abs() < 1e-6);
        }
    }
}
