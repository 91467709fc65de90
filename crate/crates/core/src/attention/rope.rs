//! Rotary position embedding, half-split layout: dimension `i` is paired
//! with dimension `i + d/2` and rotated by `position * base^(-2i/d)`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub base: f32,
    pub head_dim: usize,
}

impl RopeParams {
    pub fn new(base: f32, head_dim: usize) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::Dimension(format!("rotary head_dim must be even and non-zero, got {head_dim}")));
        }
        if !(base > 1.0) || !base.is_finite() {
            return Err(Error::Config(format!("rotary base must be > 1, got {base}")));
        }
        Ok(Self { base, head_dim })
    }

    pub fn inv_freq<F: Scalar>(&self) -> Vec<F> {
        let half = self.head_dim / 2;
        let base = self.base as f64;
        (0..half).map(|i| F::of(base.powf(-2.0 * i as f64 / self.head_dim as f64))).collect()
    }
}

/// Rotates one head vector in place. A negative position undoes the rotation.
#[inline]
pub fn rotate_row<F: Scalar>(row: &mut [F], position: F, inv_freq: &[F]) {
    let half = inv_freq.len();
    debug_assert_eq!(row.len(), 2 * half);
    for (i, &freq) in inv_freq.iter().enumerate() {
        let (sin, cos) = (position * freq).sin_cos();
        let a = row[i];
        let b = row[i + half];
        row[i] = a * cos - b * sin;
        row[i + half] = a * sin + b * cos;
    }
}

/// Returns a copy of `x` with row `t` rotated to `positions[t]`.
pub fn rope_rotate(x: ArrayView2<f32>, positions: &[i64], params: &RopeParams) -> Result<Array2<f32>> {
    if x.ncols() != params.head_dim {
        return Err(Error::Dimension(format!(
            "rope input has {} columns, params expect {}",
            x.ncols(),
            params.head_dim
        )));
    }
    if !params.head_dim.is_multiple_of(2) {
        return Err(Error::Dimension("rotary head_dim must be even".into()));
    }
    if positions.len() != x.nrows() {
        return Err(Error::Dimension(format!("{} positions for {} rows", positions.len(), x.nrows())));
    }
    let inv_freq = params.inv_freq::<f32>();
    let mut out = x.to_owned();
    for (mut row, &pos) in out.rows_mut().into_iter().zip(positions) {
        let slice = row.as_slice_mut().expect("owned rows are contiguous");
        rotate_row(slice, pos as f32, &inv_freq);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::{dot, norm};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn position_zero_is_identity() {
        let x = random(3, 8, 1);
        let params = RopeParams::new(10_000.0, 8).unwrap();
        let y = rope_rotate(x.view(), &[0, 0, 0], &params).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rotation_preserves_norm() {
        let x = random(16, 16, 2);
        let params = RopeParams::new(10_000.0, 16).unwrap();
        let positions: Vec<i64> = (0..16).map(|i| i * 37 - 100).collect();
        let y = rope_rotate(x.view(), &positions, &params).unwrap();
        for (a, b) in x.rows().into_iter().zip(y.rows()) {
            let (na, nb) = (norm(a.as_slice().unwrap()), norm(b.as_slice().unwrap()));
            assert!((na - nb).abs() < 1e-5, "{na} vs {nb}");
        }
    }

    #[test]
    fn opposite_rotations_compose_to_identity() {
        let x = random(8, 32, 3);
        let params = RopeParams::new(10_000.0, 32).unwrap();
        let positions: Vec<i64> = vec![1, 5, 17, 100, 511, 2048, 3, 0];
        let back: Vec<i64> = positions.iter().map(|p| -p).collect();
        let y = rope_rotate(x.view(), &positions, &params).unwrap();
        let z = rope_rotate(y.view(), &back, &params).unwrap();
        let max = (&x - &z).iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(max < 1e-6, "max diff {max}");
    }

    #[test]
    fn inner_products_depend_only_on_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = RopeParams::new(10_000.0, 8).unwrap();
        let inv: Vec<f64> = params.inv_freq();
        let q: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let score = |pq: f64, pk: f64| {
            let (mut a, mut b) = (q.clone(), k.clone());
            rotate_row(&mut a, pq, &inv);
            rotate_row(&mut b, pk, &inv);
            dot(&a, &b)
        };
        assert!((score(10.0, 3.0) - score(1007.0, 1000.0)).abs() < 1e-9);
    }

    #[test]
    fn odd_head_dim_rejected() {
        assert!(matches!(RopeParams::new(10_000.0, 7), Err(Error::Dimension(_))));
        let params = RopeParams { base: 10_000.0, head_dim: 7 };
        let x = random(1, 7, 5);
        assert!(matches!(rope_rotate(x.view(), &[1], &params), Err(Error::Dimension(_))));
    }
}
