use ndarray::{Array2, ArrayView1, ArrayView2, Zip};

use crate::scalar::Scalar;

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Row-wise RMS normalisation scaled by `gain`. Also returns `1 / rms` per row
/// for the backward pass.
pub(crate) fn rms_norm<F: Scalar>(x: ArrayView2<'_, F>, gain: ArrayView1<'_, F>) -> (Array2<F>, Vec<F>) {
    let d = F::of(x.ncols() as f64);
    let eps = F::of(NORM_EPS);
    let mut out = x.to_owned();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|&v| v * v).sum::<F>() / d;
        let r = F::one() / (ms + eps).sqrt();
        Zip::from(&mut row).and(&gain).for_each(|v, &g| *v = *v * r * g);
        inv.push(r);
    }
    (out, inv)
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[inline]
pub(crate) fn silu<F: Scalar>(x: F) -> F {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad<F: Scalar>(x: F) -> F {
    let s = sigmoid(x);
    s + x * s * (F::one() - s)
}

/// Columns `[head * d, (head + 1) * d)` as an owned contiguous matrix.
pub(crate) fn head_block<F: Scalar>(x: ArrayView2<'_, F>, head: usize, d: usize) -> Array2<F> {
    x.slice(ndarray::s![.., head * d..(head + 1) * d]).to_owned()
}
