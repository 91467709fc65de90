use std::collections::BTreeSet;

use ndarray::{ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::scalar::norm;

/// Whether stored keys carry position information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationState {
    Unrotated = 0,
    Positioned = 1,
}

impl RotationState {
    pub(crate) fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(RotationState::Unrotated),
            1 => Some(RotationState::Positioned),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct Slot {
    pub(crate) keys: Vec<f32>,
    pub(crate) values: Vec<f32>,
    pub(crate) key_norms: Vec<f32>,
}

impl Slot {
    fn len(&self, head_dim: usize) -> usize {
        self.keys.len() / head_dim
    }
}

/// Cached per-layer, per-head keys and values for a tokenized document.
///
/// Token `i` of every slot corresponds to `token_ids[i]`, which came from
/// document position `original_positions[i]` (the two differ only after
/// pruning).
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    n_layers: usize,
    n_heads: usize,
    head_dim: usize,
    rotation: RotationState,
    pub(crate) slots: Vec<Slot>,
    token_ids: Vec<u32>,
    original_positions: Vec<u32>,
}

impl MemoryBank {
    pub fn new(n_layers: usize, n_heads: usize, head_dim: usize, rotation: RotationState) -> Self {
        Self {
            n_layers,
            n_heads,
            head_dim,
            rotation,
            slots: vec![Slot::default(); n_layers * n_heads],
            token_ids: Vec::new(),
            original_positions: Vec::new(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn rotation_state(&self) -> RotationState {
        self.rotation
    }

    pub fn n_tokens(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    /// Document position each stored token came from.
    pub fn original_positions(&self) -> &[u32] {
        &self.original_positions
    }

    /// Tokens stored for one (layer, head) slot.
    pub fn slot_len(&self, layer: usize, head: usize) -> Result<usize> {
        Ok(self.slot(layer, head)?.len(self.head_dim))
    }

    /// True when every slot holds exactly `n_tokens` entries.
    pub fn is_complete(&self) -> bool {
        let n = self.n_tokens();
        self.slots.iter().all(|s| s.len(self.head_dim) == n)
    }

    pub fn keys(&self, layer: usize, head: usize) -> Result<ArrayView2<'_, f32>> {
        let slot = self.slot(layer, head)?;
        Ok(ArrayView2::from_shape((slot.len(self.head_dim), self.head_dim), &slot.keys)
            .expect("slot length is a multiple of head_dim"))
    }

    pub fn values(&self, layer: usize, head: usize) -> Result<ArrayView2<'_, f32>> {
        let slot = self.slot(layer, head)?;
        Ok(ArrayView2::from_shape((slot.len(self.head_dim), self.head_dim), &slot.values)
            .expect("slot length is a multiple of head_dim"))
    }

    pub(crate) fn key_norms(&self, layer: usize, head: usize) -> Result<&[f32]> {
        Ok(&self.slot(layer, head)?.key_norms)
    }

    pub(crate) fn slot_index(&self, layer: usize, head: usize) -> Result<usize> {
        if layer >= self.n_layers {
            return Err(Error::InvalidLayer { layer, reason: format!("bank has {} layers", self.n_layers) });
        }
        if head >= self.n_heads {
            return Err(Error::Dimension(format!("head {head} out of range for {} heads", self.n_heads)));
        }
        Ok(layer * self.n_heads + head)
    }

    fn slot(&self, layer: usize, head: usize) -> Result<&Slot> {
        Ok(&self.slots[self.slot_index(layer, head)?])
    }

    /// Appends `t` key/value rows to one slot. Tokens are indexed in insertion
    /// order; the first slot to reach a position records its token id, later
    /// slots must agree with it.
    pub fn insert(
        &mut self,
        layer: usize,
        head: usize,
        keys: ArrayView2<'_, f32>,
        values: ArrayView2<'_, f32>,
        token_ids: &[u32],
    ) -> Result<()> {
        let idx = self.slot_index(layer, head)?;
        let (t, d) = keys.dim();
        if d != self.head_dim {
            return Err(Error::Dimension(format!("keys have width {d}, bank head_dim is {}", self.head_dim)));
        }
        if values.dim() != (t, d) {
            return Err(Error::Dimension(format!("values {:?} do not match keys {:?}", values.dim(), (t, d))));
        }
        if token_ids.len() != t {
            return Err(Error::Dimension(format!("{} token ids for {t} rows", token_ids.len())));
        }
        let keys: Vec<f32> = keys.iter().copied().collect();
        let values: Vec<f32> = values.iter().copied().collect();
        ensure_finite(&keys, "memory keys")?;
        ensure_finite(&values, "memory values")?;

        let start = self.slots[idx].len(d);
        for (offset, &id) in token_ids.iter().enumerate() {
            let pos = start + offset;
            match self.token_ids.get(pos) {
                Some(&existing) if existing != id => {
                    return Err(Error::Contract(format!(
                        "token id {id} at position {pos} disagrees with previously stored {existing}"
                    )));
                }
                Some(_) => {}
                None => {
                    if pos != self.token_ids.len() {
                        return Err(Error::Contract("slots must be filled contiguously".into()));
                    }
                    self.token_ids.push(id);
                    self.original_positions.push(pos as u32);
                }
            }
        }
        let slot = &mut self.slots[idx];
        slot.key_norms.extend(keys.chunks_exact(d).map(norm));
        slot.keys.extend_from_slice(&keys);
        slot.values.extend_from_slice(&values);
        Ok(())
    }

    /// Appends the same `t` tokens to every slot from `[layer][head][t][d]`
    /// stacks of keys and values.
    pub fn append(
        &mut self,
        keys: &[ArrayView3<'_, f32>],
        values: &[ArrayView3<'_, f32>],
        token_ids: &[u32],
    ) -> Result<()> {
        if keys.len() != self.n_layers || values.len() != self.n_layers {
            return Err(Error::Dimension(format!(
                "expected {} layers of keys/values, got {}/{}",
                self.n_layers,
                keys.len(),
                values.len()
            )));
        }
        for layer in 0..self.n_layers {
            if keys[layer].shape()[0] != self.n_heads || values[layer].shape()[0] != self.n_heads {
                return Err(Error::Dimension(format!("layer {layer} must have {} heads", self.n_heads)));
            }
            for head in 0..self.n_heads {
                self.insert(
                    layer,
                    head,
                    keys[layer].index_axis(ndarray::Axis(0), head),
                    values[layer].index_axis(ndarray::Axis(0), head),
                    token_ids,
                )?;
            }
        }
        Ok(())
    }

    /// Drops every token whose id is in `special_ids`, across all slots,
    /// keeping the survivors in order and their original positions.
    pub fn prune_special_tokens(&self, special_ids: &BTreeSet<u32>) -> Result<MemoryBank> {
        if !self.is_complete() {
            return Err(Error::Contract("cannot prune a partially filled bank".into()));
        }
        let keep: Vec<usize> = (0..self.n_tokens()).filter(|&i| !special_ids.contains(&self.token_ids[i])).collect();
        if keep.len() == self.n_tokens() {
            return Ok(self.clone());
        }
        let d = self.head_dim;
        let slots = self
            .slots
            .iter()
            .map(|s| Slot {
                keys: keep.iter().flat_map(|&i| s.keys[i * d..(i + 1) * d].iter().copied()).collect(),
                values: keep.iter().flat_map(|&i| s.values[i * d..(i + 1) * d].iter().copied()).collect(),
                key_norms: keep.iter().map(|&i| s.key_norms[i]).collect(),
            })
            .collect();
        Ok(MemoryBank {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            rotation: self.rotation,
            slots,
            token_ids: keep.iter().map(|&i| self.token_ids[i]).collect(),
            original_positions: keep.iter().map(|&i| self.original_positions[i]).collect(),
        })
    }

    pub(crate) fn from_parts(
        n_layers: usize,
        n_heads: usize,
        head_dim: usize,
        rotation: RotationState,
        slots: Vec<Slot>,
        token_ids: Vec<u32>,
        original_positions: Vec<u32>,
    ) -> Self {
        Self { n_layers, n_heads, head_dim, rotation, slots, token_ids, original_positions }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn rows(t: usize, d: usize, start: f32) -> Array2<f32> {
        Array2::from_shape_fn((t, d), |(i, j)| start + (i * d + j) as f32)
    }

    #[test]
    fn insert_counts_tokens() {
        let mut bank = MemoryBank::new(1, 1, 2, RotationState::Unrotated);
        let k = rows(4, 2, 0.0);
        bank.insert(0, 0, k.view(), k.view(), &[1, 2, 3, 4]).unwrap();
        assert_eq!(bank.n_tokens(), 4);
    }

    #[test]
    fn insert_preserves_order() {
        let mut bank = MemoryBank::new(1, 1, 2, RotationState::Unrotated);
        let a = rows(3, 2, 0.0);
        let b = rows(2, 2, 100.0);
        bank.insert(0, 0, a.view(), a.view(), &[7, 8, 9]).unwrap();
        bank.insert(0, 0, b.view(), b.view(), &[10, 11]).unwrap();
        assert_eq!(bank.n_tokens(), 5);
        let keys = bank.keys(0, 0).unwrap();
        assert_eq!(keys.slice(ndarray::s![0..3, ..]), a);
        assert_eq!(bank.token_ids(), &[7, 8, 9, 10, 11]);
        assert_eq!(bank.original_positions(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn insert_rejects_width_mismatch() {
        let mut bank = MemoryBank::new(1, 1, 2, RotationState::Unrotated);
        let k = rows(2, 3, 0.0);
        assert!(matches!(bank.insert(0, 0, k.view(), k.view(), &[0, 1]), Err(Error::Dimension(_))));
    }

    #[test]
    fn insert_rejects_non_finite() {
        let mut bank = MemoryBank::new(1, 1, 2, RotationState::Unrotated);
        let mut k = rows(2, 2, 0.0);
        k[[1, 1]] = f32::NAN;
        assert!(matches!(bank.insert(0, 0, k.view(), k.view(), &[0, 1]), Err(Error::Numeric(_))));
    }

    #[test]
    fn insert_rejects_bad_layer() {
        let mut bank = MemoryBank::new(2, 1, 2, RotationState::Unrotated);
        let k = rows(1, 2, 0.0);
        assert!(matches!(bank.insert(2, 0, k.view(), k.view(), &[0]), Err(Error::InvalidLayer { layer: 2, .. })));
    }

    #[test]
    fn slots_must_agree_on_token_ids() {
        let mut bank = MemoryBank::new(1, 2, 2, RotationState::Unrotated);
        let k = rows(2, 2, 0.0);
        bank.insert(0, 0, k.view(), k.view(), &[1, 2]).unwrap();
        assert!(!bank.is_complete());
        assert!(bank.insert(0, 1, k.view(), k.view(), &[1, 3]).is_err());
        bank.insert(0, 1, k.view(), k.view(), &[1, 2]).unwrap();
        assert!(bank.is_complete());
    }

    fn four_token_bank() -> MemoryBank {
        let mut bank = MemoryBank::new(2, 2, 2, RotationState::Unrotated);
        for layer in 0..2 {
            for head in 0..2 {
                let k = rows(4, 2, (layer * 10 + head) as f32);
                bank.insert(layer, head, k.view(), (-&k).view(), &[0, 5, 6, 1]).unwrap();
            }
        }
        bank
    }

    #[test]
    fn prune_drops_special_tokens_everywhere() {
        let bank = four_token_bank();
        let special: BTreeSet<u32> = [0, 1].into();
        let pruned = bank.prune_special_tokens(&special).unwrap();
        assert_eq!(pruned.n_tokens(), 2);
        assert_eq!(pruned.token_ids(), &[5, 6]);
        assert_eq!(pruned.original_positions(), &[1, 2]);
        for layer in 0..2 {
            for head in 0..2 {
                let before = bank.keys(layer, head).unwrap();
                let after = pruned.keys(layer, head).unwrap();
                assert_eq!(after.row(0), before.row(1));
                assert_eq!(after.row(1), before.row(2));
                assert_eq!(pruned.values(layer, head).unwrap().row(1), bank.values(layer, head).unwrap().row(2));
            }
        }
    }

    #[test]
    fn prune_with_empty_set_is_identity() {
        let bank = four_token_bank();
        assert_eq!(bank.prune_special_tokens(&BTreeSet::new()).unwrap(), bank);
    }

    #[test]
    fn prune_everything_leaves_empty_bank() {
        let bank = four_token_bank();
        let special: BTreeSet<u32> = [0, 1, 5, 6].into();
        let pruned = bank.prune_special_tokens(&special).unwrap();
        assert!(pruned.is_empty());
        assert!(pruned.is_complete());
    }
}
