use crate::model::Weights;
use crate::scalar::Scalar;

/// Moments of parameters that stop receiving gradient decay geometrically
/// into subnormal range, where arithmetic is very slow. They are cut to zero
/// well before that.
const FLUSH_BELOW: f64 = 1e-30;

#[inline]
fn flush<F: Scalar>(x: F, tiny: F) -> F {
    if x.abs() < tiny {
        F::zero()
    } else {
        x
    }
}

/// Adam with global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    step: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(weights: &Weights<F>, clip_norm: f64) -> Self {
        let zeros: Vec<Vec<F>> = weights.slices().iter().map(|s| vec![F::zero(); s.len()]).collect();
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-8, clip_norm, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(&mut self, weights: &mut Weights<F>, grad: &Weights<F>, lr: f64) -> f64 {
        let norm = grad
            .slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|g| {
                let g = g.to_f64().unwrap_or(f64::NAN);
                g * g
            })
            .sum::<f64>()
            .sqrt();
        let clip = if norm > self.clip_norm && norm.is_finite() { self.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let step_size = F::of(lr * c2.sqrt() / c1);
        let (clip, eps) = (F::of(clip), F::of(self.eps));
        let tiny = F::of(FLUSH_BELOW);
        for (((w, g), m), v) in weights.slices_mut().into_iter().zip(grad.slices()).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..w.len() {
                let gi = g[i] * clip;
                m[i] = flush(b1 * m[i] + (F::one() - b1) * gi, tiny);
                v[i] = flush(b2 * v[i] + (F::one() - b2) * gi * gi, tiny);
                w[i] -= step_size * m[i] / (v[i].sqrt() + eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PositionEncoding};

    #[test]
    fn first_step_moves_each_parameter_by_lr() {
        let mut cfg = ModelConfig::toy(5, PositionEncoding::Alibi);
        cfg.n_layers = 1;
        cfg.n_heads = 1;
        cfg.head_dim = 2;
        let mut w = Weights::<f64>::zeros(&cfg).unwrap();
        let mut g = w.clone();
        for s in g.slices_mut() {
            s.fill(1e-3);
        }
        let before = w.clone();
        Adam::new(&w, 1e9).step(&mut w, &g, 0.01);
        for (a, b) in w.slices().iter().zip(before.slices()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((y - x - 0.01).abs() < 1e-6);
            }
        }
    }
}
