use ndarray::{Array2, ArrayView2, ArrayView3};

use super::alibi::{distance_bias, MEMORY_DISTANCE};
use crate::error::{Error, Result};
use crate::scalar::{axpy, dot};

/// Position terms added to the scaled logits of one head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PositionBias {
    /// No additive bias (rotary heads carry position in the vectors).
    None,
    /// Linear bias; memory columns are placed `memory_distance` away.
    Alibi { slope: f32, memory_distance: f32 },
}

impl PositionBias {
    pub fn alibi(slope: f32) -> Self {
        PositionBias::Alibi { slope, memory_distance: MEMORY_DISTANCE }
    }

    #[inline]
    fn local(&self, query_pos: usize, key_pos: usize) -> f32 {
        match *self {
            PositionBias::None => 0.0,
            PositionBias::Alibi { slope, .. } => distance_bias(slope, query_pos as f32 - key_pos as f32),
        }
    }

    #[inline]
    fn memory(&self) -> f32 {
        match *self {
            PositionBias::None => 0.0,
            PositionBias::Alibi { slope, memory_distance } => distance_bias(slope, memory_distance),
        }
    }
}

/// Operands of one head's attention over `[memories ∥ local context]`.
///
/// `memory_keys`/`memory_values` are `[q][k][d]`: every query brings its own
/// retrieved memories and cannot see anyone else's.
#[derive(Debug, Clone)]
pub struct AttentionInputs<'a> {
    /// Queries used against local keys (already rotated in rotary mode).
    pub queries: ArrayView2<'a, f32>,
    /// Queries used against memory keys; `None` reuses `queries`.
    pub memory_queries: Option<ArrayView2<'a, f32>>,
    pub local_keys: ArrayView2<'a, f32>,
    pub local_values: ArrayView2<'a, f32>,
    pub memory_keys: ArrayView3<'a, f32>,
    pub memory_values: ArrayView3<'a, f32>,
    pub retrieval_mask: ArrayView2<'a, bool>,
    pub bias: PositionBias,
    pub query_positions: &'a [usize],
    pub local_key_positions: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Array2<f32>,
    /// `[q][k + l]`: memory columns first, then local columns.
    pub weights: Array2<f32>,
}

/// Lower-triangular visibility for `q_len` queries placed at positions
/// `offset..offset + q_len` over `l_len` keys at positions `0..l_len`.
pub fn causal_mask(q_len: usize, l_len: usize, offset: usize) -> Result<Array2<bool>> {
    if offset + q_len > l_len {
        return Err(Error::Contract(format!("queries at {offset}..{} exceed {l_len} keys", offset + q_len)));
    }
    Ok(Array2::from_shape_fn((q_len, l_len), |(i, j)| j <= offset + i))
}

/// One joint softmax over retrieved memories and causally visible local keys.
pub fn extended_attention(inputs: &AttentionInputs<'_>) -> Result<AttentionOutput> {
    let mut weights =
        Array2::zeros((inputs.queries.nrows(), inputs.memory_keys.shape()[1] + inputs.local_keys.nrows()));
    let output = attend(inputs, Some(&mut weights))?;
    Ok(AttentionOutput { output, weights })
}

pub(crate) fn validate(inputs: &AttentionInputs<'_>) -> Result<()> {
    let (q, d) = inputs.queries.dim();
    let l = inputs.local_keys.nrows();
    let (mq, k, md) = inputs.memory_keys.dim();
    let shape_err = |what: &str| Err(Error::Dimension(what.to_string()));
    if inputs.local_keys.ncols() != d || inputs.local_values.dim() != (l, d) {
        return shape_err("local keys/values must be [l][d] matching the queries");
    }
    if inputs.memory_values.dim() != (mq, k, md) || inputs.retrieval_mask.dim() != (mq, k) {
        return shape_err("memory values and mask must align with memory keys");
    }
    if k > 0 && (mq != q || md != d) {
        return shape_err("memory keys must be [q][k][d]");
    }
    if let Some(mq) = &inputs.memory_queries {
        if mq.dim() != (q, d) {
            return shape_err("memory queries must match the queries' shape");
        }
    }
    if inputs.query_positions.len() != q || inputs.local_key_positions.len() != l {
        return shape_err("one position per query and per local key");
    }
    Ok(())
}

/// Shared kernel. Masked columns never enter the softmax, so their weight is
/// exactly zero.
pub(crate) fn attend(inputs: &AttentionInputs<'_>, mut weights_out: Option<&mut Array2<f32>>) -> Result<Array2<f32>> {
    validate(inputs)?;
    let (q, d) = inputs.queries.dim();
    let l = inputs.local_keys.nrows();
    let k = inputs.memory_keys.shape()[1];
    let scale = 1.0 / (d as f32).sqrt();
    let mem_bias = inputs.bias.memory();

    let mut output = Array2::<f32>::zeros((q, d));
    let mut logits = vec![0.0f32; k + l];
    let mut visible = vec![false; k + l];
    let mut scratch_q = vec![0.0f32; d];
    let mut scratch_mq = vec![0.0f32; d];
    let mut scratch_k = vec![0.0f32; d];

    for i in 0..q {
        let qrow = row(inputs.queries, i, &mut scratch_q);
        let mqrow = match &inputs.memory_queries {
            Some(mq) => row(*mq, i, &mut scratch_mq),
            None => qrow,
        };
        let pos_i = inputs.query_positions[i];
        let mut max = f32::NEG_INFINITY;

        for j in 0..k {
            if inputs.retrieval_mask[[i, j]] {
                let key = inputs.memory_keys.slice(ndarray::s![i, j, ..]);
                let key = match key.as_slice() {
                    Some(s) => s,
                    None => {
                        scratch_k.iter_mut().zip(key.iter()).for_each(|(o, &v)| *o = v);
                        &scratch_k[..]
                    }
                };
                let z = dot(mqrow, key) * scale + mem_bias;
                logits[j] = z;
                visible[j] = true;
                max = max.max(z);
            } else {
                visible[j] = false;
            }
        }
        for j in 0..l {
            let pos_j = inputs.local_key_positions[j];
            if pos_j <= pos_i {
                let key = inputs.local_keys.row(j);
                let z = match key.as_slice() {
                    Some(s) => dot(qrow, s),
                    None => key.iter().zip(qrow).map(|(a, b)| a * b).sum(),
                } * scale
                    + inputs.bias.local(pos_i, pos_j);
                logits[k + j] = z;
                visible[k + j] = true;
                max = max.max(z);
            } else {
                visible[k + j] = false;
            }
        }
        if !max.is_finite() {
            if visible.iter().any(|&v| v) {
                return Err(Error::Numeric(format!("non-finite attention logit for query {i}")));
            }
            return Err(Error::Contract(format!("query {i} has no visible memory or local key")));
        }

        let mut total = 0.0f32;
        for (z, &vis) in logits.iter_mut().zip(&visible) {
            *z = if vis { (*z - max).exp() } else { 0.0 };
            total += *z;
        }
        let inv = 1.0 / total;
        let mut out_row = output.row_mut(i);
        let out = out_row.as_slice_mut().expect("fresh array is contiguous");
        for j in 0..k {
            if visible[j] {
                let w = logits[j] * inv;
                let v = inputs.memory_values.slice(ndarray::s![i, j, ..]);
                match v.as_slice() {
                    Some(s) => axpy(w, s, out),
                    None => out.iter_mut().zip(v.iter()).for_each(|(o, &x)| *o += w * x),
                }
            }
        }
        for j in 0..l {
            if visible[k + j] {
                let w = logits[k + j] * inv;
                let v = inputs.local_values.row(j);
                match v.as_slice() {
                    Some(s) => axpy(w, s, out),
                    None => out.iter_mut().zip(v.iter()).for_each(|(o, &x)| *o += w * x),
                }
            }
        }
        if let Some(w) = weights_out.as_deref_mut() {
            for (dst, &p) in w.row_mut(i).iter_mut().zip(&logits) {
                *dst = p * inv;
            }
        }
    }
    Ok(output)
}

#[inline]
fn row<'a>(m: ArrayView2<'a, f32>, i: usize, scratch: &'a mut [f32]) -> &'a [f32] {
    let r = m.index_axis_move(ndarray::Axis(0), i);
    match r.to_slice() {
        Some(s) => s,
        None => {
            scratch.iter_mut().zip(r.iter()).for_each(|(o, &v)| *o = v);
            scratch
        }
    }
}
