//! Row-wise kernels with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::params::{Grads, ParamId};

pub(crate) const LN_EPS: f64 = 1e-5;
const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044_715;

/// `x · W + b` with `W` stored as (in, out).
pub(crate) fn linear(x: ArrayView2<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b;
    y
}

/// Accumulates dW, db for a linear layer and returns dX.
pub(crate) fn linear_backward(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    dy: ArrayView2<f64>,
    grads: &mut Grads,
    w_id: ParamId,
    b_id: ParamId,
) -> Array2<f64> {
    if let Some(mut dw) = grads.mat_mut(w_id) {
        ndarray::linalg::general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut dw);
    }
    if let Some(mut db) = grads.vec_mut(b_id) {
        db += &dy.sum_axis(Axis(0));
    }
    dy.dot(&w.t())
}

pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

pub(crate) fn layer_norm(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = Array2::zeros(x.raw_dim());
    let mut rstd = Array1::zeros(x.nrows());
    for (i, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        Zip::from(xhat.row_mut(i))
            .and(&row)
            .for_each(|h, &v| *h = (v - mean) * r);
    }
    let mut y = &xhat * &gamma;
    y += &beta;
    (y, LnCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward(
    dy: ArrayView2<f64>,
    cache: &LnCache,
    gamma: ArrayView1<f64>,
    grads: &mut Grads,
    gamma_id: ParamId,
    beta_id: ParamId,
) -> Array2<f64> {
    if let Some(mut dg) = grads.vec_mut(gamma_id) {
        dg += &(&dy * &cache.xhat).sum_axis(Axis(0));
    }
    if let Some(mut db) = grads.vec_mut(beta_id) {
        db += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as f64;
    let dxhat = &dy * &gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let g = dxhat.row(i);
        let h = cache.xhat.row(i);
        let mean_g = g.sum() / d;
        let mean_gh = g.dot(&h) / d;
        let r = cache.rstd[i];
        Zip::from(dx.row_mut(i))
            .and(&g)
            .and(&h)
            .for_each(|o, &gi, &hi| *o = r * (gi - mean_g - hi * mean_gh));
    }
    dx
}

pub(crate) fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_SCALE * (v + GELU_CUBIC * v * v * v)).tanh()))
}

/// dL/dx given dL/dy and the pre-activation input.
pub(crate) fn gelu_backward(dy: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(x.raw_dim());
    Zip::from(&mut dx).and(dy).and(x).for_each(|o, &g, &v| {
        let inner = GELU_SCALE * (v + GELU_CUBIC * v * v * v);
        let t = inner.tanh();
        let d_inner = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * v * v);
        *o = g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner);
    });
    dx
}

/// Numerically stable log-softmax of a single row.
pub(crate) fn log_softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.mapv(|v| v - lse)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = array![[1.0, 2.0, 3.0, 4.0], [-2.0, 0.0, 2.0, 10.0]];
        let g = Array1::ones(4);
        let b = Array1::zeros(4);
        let (y, _) = layer_norm(x.view(), g.view(), b.view());
        for row in y.outer_iter() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        let xs = array![[-3.0, -0.7, 0.0, 0.4, 2.5]];
        let ones = Array2::ones(xs.raw_dim());
        let analytic = gelu_backward(&ones, &xs);
        let h = 1e-6;
        for (j, &v) in xs.iter().enumerate() {
            let plus = gelu(&array![[v + h]])[[0, 0]];
            let minus = gelu(&array![[v - h]])[[0, 0]];
            let numeric = (plus - minus) / (2.0 * h);
            assert!((numeric - analytic[[0, j]]).abs() < 1e-8);
        }
    }

    #[test]
    fn log_softmax_normalizes() {
        let row = array![1.0, 2.0, 3.0, 1000.0];
        let ls = log_softmax(row.view());
        let total: f64 = ls.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(array![0.5, 2.0, 2.0, 1.0].view()), 1);
    }
}
