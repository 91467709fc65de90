use std::cmp::Ordering;
use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::bank::MemoryBank;
use crate::error::{Error, Result};
use crate::scalar::{dot, norm};

/// Guard added to vector norms in cosine similarity.
pub const NORM_EPSILON: f32 = 1e-8;

/// Similarity threshold found to work well for linear-bias models.
pub const DEFAULT_SIM_THRESHOLD: f32 = 0.25;

/// How retrieved memories are positioned relative to the local context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Linear-bias models: memories sit one position after the inputs.
    AlibiOffset,
    /// Rotary models: memory keys and the query used against them are unrotated.
    RopeUnrotated,
}

/// Which query vector is compared against memory keys in rotary mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryQuery {
    /// Position-free inner products: the query before rotation.
    #[default]
    Unrotated,
    /// The rotated query (for A/B comparison only).
    Rotated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Memories retrieved per query token, per layer and head.
    pub k: usize,
    /// Retrieved memories scoring below this are masked. `None` disables it.
    pub sim_threshold: Option<f32>,
    /// Stride used when caching documents.
    pub stride: usize,
    pub augmented_layers: BTreeSet<usize>,
    pub position_mode: PositionMode,
    /// Token ids dropped from banks after they are built.
    pub special_token_ids: BTreeSet<u32>,
    #[serde(default)]
    pub memory_query: MemoryQuery,
}

impl RetrievalConfig {
    /// All layers augmented, no threshold.
    pub fn all_layers(n_layers: usize, k: usize, stride: usize, position_mode: PositionMode) -> Self {
        Self {
            k,
            sim_threshold: None,
            stride,
            augmented_layers: (0..n_layers).collect(),
            position_mode,
            special_token_ids: BTreeSet::new(),
            memory_query: MemoryQuery::Unrotated,
        }
    }

    pub fn with_k(&self, k: usize) -> Self {
        Self { k, ..self.clone() }
    }

    pub fn with_layers(&self, layers: impl IntoIterator<Item = usize>) -> Self {
        Self { augmented_layers: layers.into_iter().collect(), ..self.clone() }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if let Some(&bad) = self.augmented_layers.iter().find(|&&l| l >= n_layers) {
            return Err(Error::InvalidLayer { layer: bad, reason: format!("model has {n_layers} layers") });
        }
        if let Some(t) = self.sim_threshold {
            if !(-1.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("similarity threshold {t} outside [-1, 1]")));
            }
        }
        Ok(())
    }
}

/// Top-k retrieval for a block of queries against one (layer, head) slot.
///
/// Row `i` lists the retrieved token indices in ascending order. Entries
/// below the similarity threshold stay in the row with `mask = false`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    n_queries: usize,
    width: usize,
    indices: Vec<u32>,
    scores: Vec<f32>,
    mask: Vec<bool>,
}

impl RetrievalResult {
    pub fn empty(n_queries: usize) -> Self {
        Self { n_queries, width: 0, indices: Vec::new(), scores: Vec::new(), mask: Vec::new() }
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    /// Retrieved entries per query: `min(k, bank tokens)`.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn indices(&self, query: usize) -> &[u32] {
        &self.indices[query * self.width..(query + 1) * self.width]
    }

    pub fn scores(&self, query: usize) -> &[f32] {
        &self.scores[query * self.width..(query + 1) * self.width]
    }

    pub fn mask(&self, query: usize) -> &[bool] {
        &self.mask[query * self.width..(query + 1) * self.width]
    }

    pub fn mask_view(&self) -> ArrayView2<'_, bool> {
        ArrayView2::from_shape((self.n_queries, self.width), &self.mask).expect("consistent shape")
    }

    /// Keeps only the rows for the trailing `n` queries.
    pub fn tail(&self, n: usize) -> Self {
        let n = n.min(self.n_queries);
        let start = (self.n_queries - n) * self.width;
        Self {
            n_queries: n,
            width: self.width,
            indices: self.indices[start..].to_vec(),
            scores: self.scores[start..].to_vec(),
            mask: self.mask[start..].to_vec(),
        }
    }
}

/// `scores[i][j] = <q_i, k_j> / ((|q_i| + eps) (|k_j| + eps))`.
pub fn cosine_scores(queries: ArrayView2<'_, f32>, keys: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
    if queries.ncols() != keys.ncols() {
        return Err(Error::Dimension(format!("queries have width {}, keys {}", queries.ncols(), keys.ncols())));
    }
    let keys: Vec<Vec<f32>> = keys.rows().into_iter().map(|r| r.to_vec()).collect();
    let key_norms: Vec<f32> = keys.iter().map(|k| norm(k)).collect();
    let mut out = Array2::zeros((queries.nrows(), keys.len()));
    for (i, q) in queries.rows().into_iter().enumerate() {
        let qv: Vec<f32> = q.to_vec();
        let qn = norm(&qv) + NORM_EPSILON;
        for (j, kv) in keys.iter().enumerate() {
            out[[i, j]] = dot(&qv, kv) / (qn * (key_norms[j] + NORM_EPSILON));
        }
    }
    Ok(out)
}

impl MemoryBank {
    /// Exact cosine top-k over one slot; ties go to the lower token index.
    pub fn query_topk(
        &self,
        layer: usize,
        head: usize,
        queries: ArrayView2<'_, f32>,
        cfg: &RetrievalConfig,
    ) -> Result<RetrievalResult> {
        if !cfg.augmented_layers.contains(&layer) {
            return Err(Error::InvalidLayer { layer, reason: "layer is not in the augmented set".into() });
        }
        if queries.ncols() != self.head_dim() {
            return Err(Error::Dimension(format!(
                "queries have width {}, bank head_dim is {}",
                queries.ncols(),
                self.head_dim()
            )));
        }
        let keys = self.keys(layer, head)?;
        let key_norms = self.key_norms(layer, head)?;
        let t = keys.nrows();
        let n_queries = queries.nrows();
        let width = cfg.k.min(t);
        if width == 0 {
            return Ok(RetrievalResult::empty(n_queries));
        }
        let keys = keys.as_slice().expect("bank slots are contiguous");
        let d = self.head_dim();

        let mut indices = Vec::with_capacity(n_queries * width);
        let mut scores_out = Vec::with_capacity(n_queries * width);
        let mut mask = Vec::with_capacity(n_queries * width);
        let mut scores = vec![0.0f32; t];
        let mut order: Vec<u32> = Vec::with_capacity(t);
        let mut qbuf = vec![0.0f32; d];

        for q in queries.rows() {
            let qv: &[f32] = match q.as_slice() {
                Some(s) => s,
                None => {
                    qbuf.iter_mut().zip(q.iter()).for_each(|(o, &v)| *o = v);
                    &qbuf
                }
            };
            let qn = norm(qv) + NORM_EPSILON;
            for (j, (key, &kn)) in keys.chunks_exact(d).zip(key_norms).enumerate() {
                scores[j] = dot(qv, key) / (qn * (kn + NORM_EPSILON));
            }
            order.clear();
            order.extend(0..t as u32);
            if width < t {
                let by_rank = |a: &u32, b: &u32| rank_order(&scores, *a, *b);
                order.select_nth_unstable_by(width - 1, by_rank);
                order.truncate(width);
            }
            order.sort_unstable();
            for &idx in &order {
                let s = scores[idx as usize];
                indices.push(idx);
                scores_out.push(s);
                mask.push(cfg.sim_threshold.is_none_or(|tau| s >= tau));
            }
        }
        Ok(RetrievalResult { n_queries, width, indices, scores: scores_out, mask })
    }
}

/// Higher score first, then lower index.
#[inline]
fn rank_order(scores: &[f32], a: u32, b: u32) -> Ordering {
    scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::RotationState;
    use ndarray::{array, Array2};

    fn cfg(k: usize, threshold: Option<f32>) -> RetrievalConfig {
        RetrievalConfig { sim_threshold: threshold, ..RetrievalConfig::all_layers(1, k, 1, PositionMode::AlibiOffset) }
    }

    fn bank_from(keys: Array2<f32>) -> MemoryBank {
        let mut bank = MemoryBank::new(1, 1, keys.ncols(), RotationState::Unrotated);
        let ids: Vec<u32> = (0..keys.nrows() as u32).collect();
        bank.insert(0, 0, keys.view(), keys.view(), &ids).unwrap();
        bank
    }

    #[test]
    fn cosine_of_basis_vectors() {
        let s = cosine_scores(array![[1.0, 0.0]].view(), array![[1.0, 0.0], [0.0, 1.0]].view()).unwrap();
        assert!((s[[0, 0]] - 1.0).abs() < 1e-6 && s[[0, 1]].abs() < 1e-6);
        let s = cosine_scores(array![[2.0, 2.0]].view(), array![[1.0, 1.0]].view()).unwrap();
        assert!((s[[0, 0]] - 1.0).abs() < 1e-6);
        let s = cosine_scores(array![[1.0, 0.0]].view(), array![[-1.0, 0.0]].view()).unwrap();
        assert!((s[[0, 0]] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_vectors_score_zero() {
        let s = cosine_scores(array![[0.0, 0.0]].view(), array![[1.0, 0.0]].view()).unwrap();
        assert_eq!(s[[0, 0]], 0.0);
    }

    #[test]
    fn topk_picks_highest_scores() {
        // cosines against q = [1, 0]: 0.9, 0.1, 0.5
        let keys = array![[0.9, (1.0f32 - 0.81).sqrt()], [0.1, (1.0f32 - 0.01).sqrt()], [0.5, (0.75f32).sqrt()]];
        let bank = bank_from(keys);
        let r = bank.query_topk(0, 0, array![[1.0, 0.0]].view(), &cfg(2, None)).unwrap();
        assert_eq!(r.indices(0), &[0, 2]);
        assert!((r.scores(0)[0] - 0.9).abs() < 1e-6);
        assert_eq!(r.mask(0), &[true, true]);
    }

    #[test]
    fn k_at_least_bank_size_returns_everything_ascending() {
        let keys = array![[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]];
        let bank = bank_from(keys);
        let r = bank.query_topk(0, 0, array![[1.0, 0.2]].view(), &cfg(10, None)).unwrap();
        assert_eq!(r.width(), 3);
        assert_eq!(r.indices(0), &[0, 1, 2]);
    }

    #[test]
    fn threshold_masks_but_keeps_entries() {
        let keys = array![[0.9, (1.0f32 - 0.81).sqrt()], [0.1, (1.0f32 - 0.01).sqrt()]];
        let bank = bank_from(keys);
        let r = bank.query_topk(0, 0, array![[1.0, 0.0]].view(), &cfg(2, Some(DEFAULT_SIM_THRESHOLD))).unwrap();
        assert_eq!(r.indices(0), &[0, 1]);
        assert_eq!(r.mask(0), &[true, false]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let keys = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [2.0, 0.0]];
        let bank = bank_from(keys);
        let r = bank.query_topk(0, 0, array![[1.0, 0.0]].view(), &cfg(2, None)).unwrap();
        assert_eq!(r.indices(0), &[0, 2]);
    }

    #[test]
    fn layer_outside_augmented_set_is_rejected() {
        let bank = bank_from(array![[1.0, 0.0]]);
        let c = cfg(1, None).with_layers([]);
        assert!(matches!(bank.query_topk(0, 0, array![[1.0, 0.0]].view(), &c), Err(Error::InvalidLayer { .. })));
    }

    #[test]
    fn empty_bank_yields_empty_result() {
        let bank = MemoryBank::new(1, 1, 2, RotationState::Unrotated);
        let r = bank.query_topk(0, 0, array![[1.0, 0.0]].view(), &cfg(3, None)).unwrap();
        assert_eq!(r.width(), 0);
        assert!(r.indices(0).is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(cfg(1, None).validate(1).is_ok());
        assert!(matches!(cfg(1, None).with_layers([3]).validate(2), Err(Error::InvalidLayer { .. })));
        let bad = RetrievalConfig { stride: 0, ..cfg(1, None) };
        assert!(bad.validate(1).is_err());
    }
}
