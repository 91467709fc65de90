use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<F = f32> {
    pub attn_norm: Array1<F>,
    /// `[model_dim][model_dim]`, input rows to output columns; heads are
    /// contiguous column blocks of width `head_dim`.
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
    pub ffn_norm: Array1<F>,
    /// `[model_dim][ffn_dim]`
    pub w_up: Array2<F>,
    /// `[ffn_dim][model_dim]`
    pub w_down: Array2<F>,
}

/// Dense parameters of the toy decoder. Pre-norm residual blocks with RMS
/// normalization, multi-head attention, and a SiLU feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<F = f32> {
    pub config: ModelConfig,
    /// `[vocab][model_dim]`
    pub embedding: Array2<F>,
    pub layers: Vec<LayerWeights<F>>,
    pub final_norm: Array1<F>,
    /// `[model_dim][vocab]`
    pub lm_head: Array2<F>,
}

/// Name and shape of every tensor, in storage order.
pub fn tensor_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, f) = (config.vocab_size, config.model_dim(), config.ffn_dim());
    let mut out = vec![("embedding".to_string(), vec![v, d])];
    for l in 0..config.n_layers {
        let p = |name: &str| format!("layers.{l}.{name}");
        out.push((p("attn_norm"), vec![d]));
        out.push((p("wq"), vec![d, d]));
        out.push((p("wk"), vec![d, d]));
        out.push((p("wv"), vec![d, d]));
        out.push((p("wo"), vec![d, d]));
        out.push((p("ffn_norm"), vec![d]));
        out.push((p("w_up"), vec![d, f]));
        out.push((p("w_down"), vec![f, d]));
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("lm_head".to_string(), vec![d, v]));
    out
}

impl<F: Scalar> LayerWeights<F> {
    fn zeros(d: usize, f: usize) -> Self {
        Self {
            attn_norm: Array1::ones(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ffn_norm: Array1::ones(d),
            w_up: Array2::zeros((d, f)),
            w_down: Array2::zeros((f, d)),
        }
    }

    fn slices(&self) -> [&[F]; 8] {
        [
            contiguous(&self.attn_norm),
            contiguous(&self.wq),
            contiguous(&self.wk),
            contiguous(&self.wv),
            contiguous(&self.wo),
            contiguous(&self.ffn_norm),
            contiguous(&self.w_up),
            contiguous(&self.w_down),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [F]; 8] {
        [
            contiguous_mut(&mut self.attn_norm),
            contiguous_mut(&mut self.wq),
            contiguous_mut(&mut self.wk),
            contiguous_mut(&mut self.wv),
            contiguous_mut(&mut self.wo),
            contiguous_mut(&mut self.ffn_norm),
            contiguous_mut(&mut self.w_up),
            contiguous_mut(&mut self.w_down),
        ]
    }
}

fn contiguous<F, D: ndarray::Dimension>(a: &ndarray::Array<F, D>) -> &[F] {
    a.as_slice().expect("weights are stored in standard layout")
}

fn contiguous_mut<F, D: ndarray::Dimension>(a: &mut ndarray::Array<F, D>) -> &mut [F] {
    a.as_slice_mut().expect("weights are stored in standard layout")
}

impl<F: Scalar> Weights<F> {
    /// Zero matrices with unit norm gains. The output is uniform logits.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (v, d, f) = (config.vocab_size, config.model_dim(), config.ffn_dim());
        Ok(Self {
            config: config.clone(),
            embedding: Array2::zeros((v, d)),
            layers: (0..config.n_layers).map(|_| LayerWeights::zeros(d, f)).collect(),
            final_norm: Array1::ones(d),
            lm_head: Array2::zeros((d, v)),
        })
    }

    /// Gaussian initialisation (std 0.02, residual projections scaled down by
    /// `sqrt(2 * n_layers)`), unit norm gains.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut fill = |a: &mut [F], s: f64| {
            let dist = Normal::new(0.0, s).expect("positive std");
            a.iter_mut().for_each(|x| *x = F::of(dist.sample(rng)));
        };
        fill(contiguous_mut(&mut w.embedding), 1.0);
        for layer in &mut w.layers {
            fill(contiguous_mut(&mut layer.wq), std);
            fill(contiguous_mut(&mut layer.wk), std);
            fill(contiguous_mut(&mut layer.wv), std);
            fill(contiguous_mut(&mut layer.wo), resid_std);
            fill(contiguous_mut(&mut layer.w_up), std);
            fill(contiguous_mut(&mut layer.w_down), resid_std);
        }
        fill(contiguous_mut(&mut w.lm_head), std);
        Ok(w)
    }

    /// All tensors as flat slices, in [`tensor_layout`] order.
    pub fn slices(&self) -> Vec<&[F]> {
        let mut out = vec![contiguous(&self.embedding)];
        for layer in &self.layers {
            out.extend(layer.slices());
        }
        out.push(contiguous(&self.final_norm));
        out.push(contiguous(&self.lm_head));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = vec![contiguous_mut(&mut self.embedding)];
        for layer in &mut self.layers {
            out.extend(layer.slices_mut());
        }
        out.push(contiguous_mut(&mut self.final_norm));
        out.push(contiguous_mut(&mut self.lm_head));
        out
    }

    pub fn n_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Same parameters in another precision.
    pub fn cast<G: Scalar>(&self) -> Weights<G> {
        let mut out = Weights::<G>::zeros(&self.config).expect("config already validated");
        for (dst, src) in out.slices_mut().into_iter().zip(self.slices()) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = G::of(s.to_f64().unwrap_or(f64::NAN));
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Shapes agree with the configuration.
    pub fn check_shapes(&self) -> Result<()> {
        if self.layers.len() != self.config.n_layers {
            return Err(Error::Dimension(format!(
                "{} layers for a {}-layer config",
                self.layers.len(),
                self.config.n_layers
            )));
        }
        let layout = tensor_layout(&self.config);
        for ((name, shape), slice) in layout.iter().zip(self.slices()) {
            let expected: usize = shape.iter().product();
            if slice.len() != expected {
                return Err(Error::Dimension(format!("{name} has {} elements, expected {expected}", slice.len())));
            }
        }
        Ok(())
    }
}
