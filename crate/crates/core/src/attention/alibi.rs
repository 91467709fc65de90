//! Linear attention biases. Memory columns sit at a fixed distance of one
//! position from every query, so they all receive the same bias.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Distance at which retrieved memories are placed relative to each query.
pub const MEMORY_DISTANCE: f32 = 1.0;

/// Geometric per-head slopes `2^(-max_bias * h / n)` for `h = 1..=n`, with the
/// usual interleaving when `n` is not a power of two.
pub fn alibi_slopes(n_heads: usize, max_bias: f32) -> Vec<f32> {
    fn pow2_slopes(n: usize, max_bias: f32) -> Vec<f32> {
        let start = 2f32.powf(-max_bias / n as f32);
        (1..=n).map(|h| start.powi(h as i32)).collect()
    }
    if n_heads == 0 {
        return Vec::new();
    }
    if n_heads.is_power_of_two() {
        return pow2_slopes(n_heads, max_bias);
    }
    let closest = 1usize << (usize::BITS - 1 - n_heads.leading_zeros());
    let mut slopes = pow2_slopes(closest, max_bias);
    let extra = pow2_slopes(2 * closest, max_bias);
    slopes.extend(extra.into_iter().step_by(2).take(n_heads - closest));
    slopes
}

/// Bias terms for one head: `local[i][j] = -slope * (pos_i - pos_j)` with
/// queries aligned to the end of the key sequence, and a single constant for
/// every memory column.
#[derive(Debug, Clone, PartialEq)]
pub struct AlibiBias {
    pub local: Array2<f32>,
    pub memory: f32,
}

pub fn alibi_bias(q_len: usize, l_len: usize, slope: f32) -> Result<AlibiBias> {
    if !(slope >= 0.0) || !slope.is_finite() {
        return Err(Error::Config(format!("alibi slope must be >= 0, got {slope}")));
    }
    if q_len > l_len {
        return Err(Error::Contract(format!("{q_len} queries cannot follow only {l_len} keys")));
    }
    let offset = l_len - q_len;
    let local = Array2::from_shape_fn((q_len, l_len), |(i, j)| distance_bias(slope, (offset + i) as f32 - j as f32));
    Ok(AlibiBias { local, memory: distance_bias(slope, MEMORY_DISTANCE) })
}

#[inline]
pub(crate) fn distance_bias(slope: f32, distance: f32) -> f32 {
    if slope == 0.0 {
        0.0
    } else {
        -slope * distance
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_bias_is_linear_in_distance() {
        let bias = alibi_bias(4, 4, 0.5).unwrap();
        assert_eq!(bias.local[[3, 1]], -1.0);
        assert_eq!(bias.local[[2, 2]], 0.0);
    }

    #[test]
    fn memory_columns_sit_one_position_away() {
        assert_eq!(alibi_bias(4, 4, 0.5).unwrap().memory, -0.5);
        assert_eq!(alibi_bias(1, 9, 0.5).unwrap().memory, -0.5);
    }

    #[test]
    fn zero_slope_is_position_free() {
        let bias = alibi_bias(3, 5, 0.0).unwrap();
        assert!(bias.local.iter().all(|&b| b == 0.0));
        assert_eq!(bias.memory, 0.0);
    }

    #[test]
    fn incremental_queries_align_to_the_end() {
        let bias = alibi_bias(1, 6, 0.25).unwrap();
        assert_eq!(bias.local[[0, 5]], 0.0);
        assert_eq!(bias.local[[0, 0]], -1.25);
    }

    #[test]
    fn negative_slope_rejected() {
        assert!(alibi_bias(2, 2, -1.0).is_err());
    }

    #[test]
    fn slopes_follow_geometric_recipe() {
        assert_eq!(alibi_slopes(4, 8.0), vec![0.25, 0.0625, 0.015625, 0.00390625]);
        let s = alibi_slopes(8, 8.0);
        assert_eq!(s[0], 0.5);
        assert_eq!(s[7], 1.0 / 256.0);
        let odd = alibi_slopes(6, 8.0);
        assert_eq!(odd.len(), 6);
        assert_eq!(&odd[..4], &alibi_slopes(4, 8.0)[..]);
        assert!((odd[4] - 2f32.powf(-1.0)).abs() < 1e-7);
    }
}
