use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use super::config::{ModelConfig, PositionEncoding};
use super::ops::{head_block, rms_norm, silu};
use super::weights::Weights;
use crate::attention::{alibi_slopes, attend, rotate_row, AttentionInputs, PositionBias, RopeParams};
use crate::error::{Error, Result};
use crate::memory::{MemoryBank, MemoryQuery, RetrievalConfig, RetrievalResult, RotationState};

/// Local keys and values of the tokens processed so far, per layer and head.
/// Rotary keys are stored rotated.
#[derive(Debug, Clone)]
pub struct KvCache {
    head_dim: usize,
    len: usize,
    /// `[layer][head]` flat `[t][d]` buffers.
    keys: Vec<Vec<Vec<f32>>>,
    values: Vec<Vec<Vec<f32>>>,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        let empty = vec![vec![Vec::new(); config.n_heads]; config.n_layers];
        Self { head_dim: config.head_dim, len: 0, keys: empty.clone(), values: empty }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Forgets every position at or after `len`.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        let keep = len * self.head_dim;
        for buf in self.keys.iter_mut().chain(self.values.iter_mut()).flatten() {
            buf.truncate(keep);
        }
        self.len = len;
    }

    fn matches(&self, config: &ModelConfig) -> bool {
        self.head_dim == config.head_dim
            && self.keys.len() == config.n_layers
            && self.keys.iter().all(|l| l.len() == config.n_heads)
    }
}

/// Pre-rotation keys and values produced for the input tokens of one layer.
#[derive(Debug, Clone)]
pub struct LayerKv {
    /// `[head][t][d]`
    pub keys: Array3<f32>,
    pub values: Array3<f32>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[t][vocab]`
    pub logits: Array2<f32>,
    /// Per layer: `Some(per-head results)` for augmented layers when a bank is
    /// attached, `None` otherwise.
    pub retrievals: Vec<Option<Vec<RetrievalResult>>>,
    pub layer_kv: Vec<LayerKv>,
}

/// Inference wrapper around shared, immutable weights.
#[derive(Debug, Clone)]
pub struct Model {
    weights: Arc<Weights>,
    slopes: Vec<f32>,
    inv_freq: Vec<f32>,
    /// Positions (or linear-bias distances) are divided by this factor.
    position_scale: f32,
}

impl Model {
    pub fn new(weights: Weights) -> Result<Self> {
        Self::from_arc(Arc::new(weights))
    }

    pub fn from_arc(weights: Arc<Weights>) -> Result<Self> {
        let cfg = &weights.config;
        cfg.validate()?;
        weights.check_shapes()?;
        let slopes = alibi_slopes(cfg.n_heads, cfg.alibi_max_bias);
        let inv_freq = match cfg.position_encoding {
            PositionEncoding::Rope => RopeParams::new(cfg.rope_base, cfg.head_dim)?.inv_freq(),
            PositionEncoding::Alibi => Vec::new(),
        };
        Ok(Self { weights, slopes, inv_freq, position_scale: 1.0 })
    }

    /// Linear position interpolation by `alpha` (positions divided by `alpha`).
    pub fn with_position_interpolation(&self, alpha: f32) -> Result<Self> {
        if !(alpha >= 1.0) || !alpha.is_finite() {
            return Err(Error::Config(format!("interpolation factor must be >= 1, got {alpha}")));
        }
        Ok(Self { position_scale: alpha, ..self.clone() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.config())
    }

    /// Runs `tokens` through the decoder. With a cache, tokens continue after
    /// the cached positions and their keys/values are appended to it.
    ///
    /// Layers listed in `cfg.augmented_layers` retrieve `cfg.k` memories per
    /// query and head from `bank` and attend to them jointly with the local
    /// context; all other layers use plain causal attention. Both go through
    /// the same kernel, so an empty retrieval reproduces the plain model bit
    /// for bit.
    pub fn forward(
        &self,
        tokens: &[u32],
        bank: Option<&MemoryBank>,
        cfg: &RetrievalConfig,
        mut cache: Option<&mut KvCache>,
    ) -> Result<ForwardTrace> {
        let mc = self.config();
        if tokens.is_empty() {
            return Err(Error::Contract("forward needs at least one token".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= mc.vocab_size) {
            return Err(Error::Dimension(format!("token {bad} outside vocabulary of {}", mc.vocab_size)));
        }
        cfg.validate(mc.n_layers)?;
        if let Some(bank) = bank {
            self.check_bank(bank, cfg)?;
        }
        if let Some(c) = cache.as_deref() {
            if !c.matches(mc) {
                return Err(Error::Dimension("kv cache was built for another model shape".into()));
            }
        }

        let (n_heads, d) = (mc.n_heads, mc.head_dim);
        let t = tokens.len();
        let start = cache.as_deref().map_or(0, KvCache::len);
        let query_positions: Vec<usize> = (start..start + t).collect();
        let key_positions: Vec<usize> = (0..start + t).collect();
        let w = &*self.weights;

        let mut x = Array2::<f32>::zeros((t, mc.model_dim()));
        for (mut row, &tok) in x.rows_mut().into_iter().zip(tokens) {
            row.assign(&w.embedding.row(tok as usize));
        }

        let mut retrievals = Vec::with_capacity(mc.n_layers);
        let mut layer_kv = Vec::with_capacity(mc.n_layers);
        for (li, lw) in w.layers.iter().enumerate() {
            let (h, _) = rms_norm(x.view(), lw.attn_norm.view());
            let q = h.dot(&lw.wq);
            let k = h.dot(&lw.wk);
            let v = h.dot(&lw.wv);

            let augmented = bank.filter(|_| cfg.augmented_layers.contains(&li));
            let mut head_results = augmented.map(|_| Vec::with_capacity(n_heads));
            let mut attn = Array2::<f32>::zeros((t, mc.model_dim()));
            let mut kv = LayerKv { keys: Array3::zeros((n_heads, t, d)), values: Array3::zeros((n_heads, t, d)) };

            for head in 0..n_heads {
                let qh = head_block(q.view(), head, d);
                let kh = head_block(k.view(), head, d);
                let vh = head_block(v.view(), head, d);
                kv.keys.index_axis_mut(Axis(0), head).assign(&kh);
                kv.values.index_axis_mut(Axis(0), head).assign(&vh);

                let (q_local, k_new) = match mc.position_encoding {
                    PositionEncoding::Rope => (self.rotate(&qh, &query_positions), self.rotate(&kh, &query_positions)),
                    PositionEncoding::Alibi => (qh.clone(), kh),
                };
                let bias = match mc.position_encoding {
                    PositionEncoding::Rope => PositionBias::None,
                    PositionEncoding::Alibi => PositionBias::alibi(self.slopes[head] / self.position_scale),
                };

                let (local_keys, local_values) = match cache.as_deref() {
                    Some(c) if c.len > 0 => {
                        (stack(&c.keys[li][head], k_new.view(), d), stack(&c.values[li][head], vh.view(), d))
                    }
                    _ => (k_new.clone(), vh.clone()),
                };

                let memory_queries = match (mc.position_encoding, cfg.memory_query) {
                    (PositionEncoding::Rope, MemoryQuery::Unrotated) => &qh,
                    _ => &q_local,
                };
                let (mem_k, mem_v, result) = match augmented {
                    Some(bank) => {
                        let r = bank.query_topk(li, head, memory_queries.view(), cfg)?;
                        let (mk, mv) = gather(bank, li, head, &r)?;
                        (mk, mv, Some(r))
                    }
                    None => (Array3::zeros((t, 0, d)), Array3::zeros((t, 0, d)), None),
                };
                let empty_mask = Array2::from_elem((t, 0), false);
                let mask = result.as_ref().map_or(empty_mask.view(), RetrievalResult::mask_view);

                let inputs = AttentionInputs {
                    queries: q_local.view(),
                    memory_queries: Some(memory_queries.view()),
                    local_keys: local_keys.view(),
                    local_values: local_values.view(),
                    memory_keys: mem_k.view(),
                    memory_values: mem_v.view(),
                    retrieval_mask: mask,
                    bias,
                    query_positions: &query_positions,
                    local_key_positions: &key_positions,
                };
                let out = attend(&inputs, None)?;
                attn.slice_mut(s![.., head * d..(head + 1) * d]).assign(&out);

                if let Some(c) = cache.as_deref_mut() {
                    c.keys[li][head].extend(k_new.iter());
                    c.values[li][head].extend(vh.iter());
                }
                if let (Some(list), Some(r)) = (head_results.as_mut(), result) {
                    list.push(r);
                }
            }
            x += &attn.dot(&lw.wo);

            let (h2, _) = rms_norm(x.view(), lw.ffn_norm.view());
            let mut up = h2.dot(&lw.w_up);
            up.mapv_inplace(silu);
            x += &up.dot(&lw.w_down);

            retrievals.push(head_results);
            layer_kv.push(kv);
        }
        if let Some(c) = cache {
            c.len += t;
        }

        let (hf, _) = rms_norm(x.view(), w.final_norm.view());
        let logits = hf.dot(&w.lm_head);
        Ok(ForwardTrace { logits, retrievals, layer_kv })
    }

    fn rotate(&self, x: &Array2<f32>, positions: &[usize]) -> Array2<f32> {
        let mut out = x.clone();
        for (mut row, &p) in out.rows_mut().into_iter().zip(positions) {
            let slice = row.as_slice_mut().expect("owned rows are contiguous");
            rotate_row(slice, p as f32 / self.position_scale, &self.inv_freq);
        }
        out
    }

    fn check_bank(&self, bank: &MemoryBank, cfg: &RetrievalConfig) -> Result<()> {
        let mc = self.config();
        if (bank.n_layers(), bank.n_heads(), bank.head_dim()) != (mc.n_layers, mc.n_heads, mc.head_dim) {
            return Err(Error::Dimension(format!(
                "bank is {}x{}x{}, model is {}x{}x{}",
                bank.n_layers(),
                bank.n_heads(),
                bank.head_dim(),
                mc.n_layers,
                mc.n_heads,
                mc.head_dim
            )));
        }
        if !bank.is_complete() {
            return Err(Error::Contract("bank slots have unequal lengths".into()));
        }
        if cfg.position_mode != mc.position_encoding.memory_mode() {
            return Err(Error::Config(format!(
                "position mode {:?} does not fit a {:?} model",
                cfg.position_mode, mc.position_encoding
            )));
        }
        if mc.position_encoding == PositionEncoding::Rope && bank.rotation_state() != RotationState::Unrotated {
            return Err(Error::Config("rotary models need banks of unrotated keys".into()));
        }
        Ok(())
    }
}

fn stack(cached: &[f32], new: ArrayView2<'_, f32>, d: usize) -> Array2<f32> {
    let mut data = Vec::with_capacity(cached.len() + new.len());
    data.extend_from_slice(cached);
    data.extend(new.iter());
    let rows = data.len() / d;
    Array2::from_shape_vec((rows, d), data).expect("rows of width d")
}

/// `[q][k][d]` keys and values for the retrieved indices of each query.
fn gather(bank: &MemoryBank, layer: usize, head: usize, r: &RetrievalResult) -> Result<(Array3<f32>, Array3<f32>)> {
    let keys = bank.keys(layer, head)?;
    let values = bank.values(layer, head)?;
    let (q, k, d) = (r.n_queries(), r.width(), bank.head_dim());
    let mut mk = Array3::zeros((q, k, d));
    let mut mv = Array3::zeros((q, k, d));
    for i in 0..q {
        for (j, &idx) in r.indices(i).iter().enumerate() {
            mk.slice_mut(s![i, j, ..]).assign(&keys.row(idx as usize));
            mv.slice_mut(s![i, j, ..]).assign(&values.row(idx as usize));
        }
    }
    Ok((mk, mv))
}
