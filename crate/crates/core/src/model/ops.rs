use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::Rng;

use crate::Real;

pub const LN_EPS: f64 = 1e-5;

pub fn matmul<F: Real>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(F::one(), &a, &b, F::zero(), &mut out);
    out
}

/// `x · w + b` with `w` stored `[in, out]`.
pub fn linear<F: Real>(x: ArrayView2<F>, w: ArrayView2<F>, b: ArrayView1<F>) -> Array2<F> {
    let mut out = Array2::zeros((x.nrows(), w.ncols()));
    for mut row in out.rows_mut() {
        row.assign(&b);
    }
    general_mat_mul(F::one(), &x, &w, F::one(), &mut out);
    out
}

/// Accumulates weight and bias gradients and returns the input gradient.
pub fn linear_backward<F: Real>(
    x: ArrayView2<F>,
    w: ArrayView2<F>,
    dy: ArrayView2<F>,
    mut dw: ArrayViewMut2<F>,
    mut db: ArrayViewMut1<F>,
) -> Array2<F> {
    general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut dw);
    db += &dy.sum_axis(Axis(0));
    matmul(dy, w.t())
}

pub struct NormCache<F> {
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
}

pub fn layer_norm<F: Real>(
    x: ArrayView2<F>,
    gain: ArrayView1<F>,
    bias: ArrayView1<F>,
) -> (Array2<F>, NormCache<F>) {
    let d = F::of(x.ncols() as f64);
    let eps = F::of(LN_EPS);
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / d;
        let inv = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * inv);
        *s = inv;
    }
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        Zip::from(&mut row)
            .and(&gain)
            .and(&bias)
            .for_each(|y, &g, &b| *y = *y * g + b);
    }
    (y, NormCache { xhat, inv_std })
}

pub fn layer_norm_backward<F: Real>(
    cache: &NormCache<F>,
    gain: ArrayView1<F>,
    dy: ArrayView2<F>,
    mut dgain: ArrayViewMut1<F>,
    mut dbias: ArrayViewMut1<F>,
) -> Array2<F> {
    let d = F::of(dy.ncols() as f64);
    dgain += &(&dy * &cache.xhat).sum_axis(Axis(0));
    dbias += &dy.sum_axis(Axis(0));
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, dyr), xr), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(dy.rows())
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let dxhat: Array1<F> = &dyr * &gain;
        let sum = dxhat.sum();
        let dot = dxhat.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum::<F>();
        Zip::from(&mut out)
            .and(&dxhat)
            .and(&xr)
            .for_each(|o, &g, &xh| *o = inv / d * (d * g - sum - xh * dot));
    }
    dx
}

/// In-place row-wise log-softmax.
pub fn log_softmax_rows<F: Real>(mut z: ArrayViewMut2<F>) {
    for mut row in z.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
        row.mapv_inplace(|v| v - lse);
    }
}

/// In-place row-wise softmax. Rows that are entirely `-inf` are left as zeros.
pub fn softmax_rows<F: Real>(mut z: ArrayViewMut2<F>) {
    for mut row in z.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        if max == F::neg_infinity() {
            row.fill(F::zero());
            continue;
        }
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Inverted dropout factors (`0` or `1/(1-p)`), or `None` when inactive.
pub fn dropout_mask<F: Real, R: Rng>(
    rng: Option<&mut R>,
    p: f64,
    shape: (usize, usize),
) -> Option<Array2<F>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = F::of(1.0 / (1.0 - p));
    Some(Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < p {
            F::zero()
        } else {
            keep
        }
    }))
}

pub fn apply_mask<F: Real>(x: &mut Array2<F>, mask: &Option<Array2<F>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}
