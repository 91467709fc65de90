//! Batched forward and backward pass of the toy decoder, generic over the
//! float type. Memory retrieval is never used during training, so attention
//! here is plain causal self-attention with the model's position scheme.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};

use crate::attention::{alibi_slopes, rotate_row, RopeParams};
use crate::error::{Error, Result};
use crate::model::ops::{rms_norm, silu, silu_grad};
use crate::model::{PositionEncoding, Weights};
use crate::scalar::Scalar;

/// Equal-length training sequences. `targets[b][t]` is the token that should
/// follow `inputs[b][..=t]`; only positions with `mask[b][t]` count.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn seq_len(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn n_scored(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }

    fn validate(&self, vocab: usize, max_len: usize) -> Result<()> {
        let t = self.seq_len();
        if self.inputs.is_empty() || t == 0 {
            return Err(Error::Contract("empty training batch".into()));
        }
        if t > max_len {
            return Err(Error::Contract(format!("training sequences of {t} tokens exceed max_train_len {max_len}")));
        }
        let same = |v: &Vec<Vec<u32>>| v.len() == self.inputs.len() && v.iter().all(|r| r.len() == t);
        if !same(&self.targets) || self.mask.len() != self.inputs.len() || self.mask.iter().any(|m| m.len() != t) {
            return Err(Error::Dimension("batch inputs, targets and mask disagree in shape".into()));
        }
        if self.inputs.iter().chain(&self.targets).flatten().any(|&x| x as usize >= vocab) {
            return Err(Error::Dimension(format!("batch token outside vocabulary of {vocab}")));
        }
        if self.n_scored() == 0 {
            return Err(Error::Contract("batch has no scored positions".into()));
        }
        Ok(())
    }
}

struct LayerTape<F> {
    x_in: Array2<F>,
    inv1: Vec<F>,
    h: Array2<F>,
    /// Rotated (rotary) queries and keys, `[B*T][D]`.
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// `[b][head]` attention probabilities `[T][T]`.
    probs: Vec<Vec<Array2<F>>>,
    attn: Array2<F>,
    x_mid: Array2<F>,
    inv2: Vec<F>,
    h2: Array2<F>,
    up: Array2<F>,
    act: Array2<F>,
}

struct Tape<F> {
    layers: Vec<LayerTape<F>>,
    x_final: Array2<F>,
    inv_f: Vec<F>,
    hf: Array2<F>,
    /// Flat row index of each scored position.
    scored: Vec<usize>,
    targets: Vec<usize>,
    probs: Array2<F>,
    loss: F,
}

struct Consts<F> {
    slopes: Vec<F>,
    inv_freq: Vec<F>,
    encoding: PositionEncoding,
    scale: F,
}

impl<F: Scalar> Consts<F> {
    fn new(w: &Weights<F>) -> Result<Self> {
        let c = &w.config;
        let inv_freq = match c.position_encoding {
            PositionEncoding::Rope => RopeParams::new(c.rope_base, c.head_dim)?.inv_freq(),
            PositionEncoding::Alibi => Vec::new(),
        };
        Ok(Self {
            slopes: alibi_slopes(c.n_heads, c.alibi_max_bias).into_iter().map(|s| F::of(s as f64)).collect(),
            inv_freq,
            encoding: c.position_encoding,
            scale: F::one() / F::of(c.head_dim as f64).sqrt(),
        })
    }

    /// Rotates every head block of each row to its position within the sequence.
    fn rotate(&self, x: &mut Array2<F>, seq_len: usize, n_heads: usize, d: usize, sign: F) {
        if self.encoding != PositionEncoding::Rope {
            return;
        }
        for (r, mut row) in x.rows_mut().into_iter().enumerate() {
            let pos = sign * F::of((r % seq_len) as f64);
            let slice = row.as_slice_mut().expect("owned rows are contiguous");
            for h in 0..n_heads {
                rotate_row(&mut slice[h * d..(h + 1) * d], pos, &self.inv_freq);
            }
        }
    }

    fn bias(&self, head: usize, i: usize, j: usize) -> F {
        match self.encoding {
            PositionEncoding::Alibi => -self.slopes[head] * F::of((i - j) as f64),
            PositionEncoding::Rope => F::zero(),
        }
    }
}

/// Mean cross-entropy over the scored positions of `batch`.
pub fn batch_loss<F: Scalar>(weights: &Weights<F>, batch: &Batch) -> Result<F> {
    Ok(forward(weights, batch)?.loss)
}

/// Mean cross-entropy and its gradient with respect to every parameter.
pub fn loss_and_grad<F: Scalar>(weights: &Weights<F>, batch: &Batch) -> Result<(F, Weights<F>)> {
    let tape = forward(weights, batch)?;
    let grad = backward(weights, batch, &tape)?;
    Ok((tape.loss, grad))
}

/// Mean cross-entropy and the number of scored positions whose arg-max
/// prediction equals the target.
pub fn batch_eval<F: Scalar>(weights: &Weights<F>, batch: &Batch) -> Result<(F, usize)> {
    let tape = forward(weights, batch)?;
    let correct = tape
        .probs
        .rows()
        .into_iter()
        .zip(&tape.targets)
        .filter(|(row, &target)| argmax(row.iter().copied()) == target)
        .count();
    Ok((tape.loss, correct))
}

/// Index of the largest value; ties go to the lower index.
pub(crate) fn argmax<F: PartialOrd>(values: impl IntoIterator<Item = F>) -> usize {
    let mut best: Option<(usize, F)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.as_ref().is_none_or(|(_, b)| v > *b) {
            best = Some((i, v));
        }
    }
    best.map_or(0, |(i, _)| i)
}

/// Logits of every position, `[B*T][vocab]`. Used to cross-check against the
/// inference path.
pub fn batch_logits<F: Scalar>(weights: &Weights<F>, inputs: &[Vec<u32>]) -> Result<Array2<F>> {
    let t = inputs.first().map_or(0, Vec::len);
    let batch = Batch { inputs: inputs.to_vec(), targets: inputs.to_vec(), mask: vec![vec![true; t]; inputs.len()] };
    let tape = forward(weights, &batch)?;
    let (hf, lm) = (&tape.hf, &weights.lm_head);
    Ok(hf.dot(lm))
}

fn forward<F: Scalar>(w: &Weights<F>, batch: &Batch) -> Result<Tape<F>> {
    let cfg = &w.config;
    batch.validate(cfg.vocab_size, cfg.max_train_len)?;
    let consts = Consts::new(w)?;
    let (b, t) = (batch.inputs.len(), batch.seq_len());
    let (n_heads, d, dm) = (cfg.n_heads, cfg.head_dim, cfg.model_dim());
    let tiny = F::of(1e-30);

    let mut x = Array2::<F>::zeros((b * t, dm));
    for (mut row, &tok) in x.rows_mut().into_iter().zip(batch.inputs.iter().flatten()) {
        row.assign(&w.embedding.row(tok as usize));
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lw in &w.layers {
        let x_in = x.clone();
        let (h, inv1) = rms_norm(x.view(), lw.attn_norm.view());
        let mut q = h.dot(&lw.wq);
        let mut k = h.dot(&lw.wk);
        let v = h.dot(&lw.wv);
        consts.rotate(&mut q, t, n_heads, d, F::one());
        consts.rotate(&mut k, t, n_heads, d, F::one());

        let mut attn = Array2::<F>::zeros((b * t, dm));
        let mut probs = Vec::with_capacity(b);
        for bi in 0..b {
            let rows = bi * t..(bi + 1) * t;
            let mut per_head = Vec::with_capacity(n_heads);
            for head in 0..n_heads {
                let cols = head * d..(head + 1) * d;
                let qh = q.slice(s![rows.clone(), cols.clone()]);
                let kh = k.slice(s![rows.clone(), cols.clone()]);
                let vh = v.slice(s![rows.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t());
                for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                    let mut max = F::neg_infinity();
                    for j in 0..=i {
                        row[j] = row[j] * consts.scale + consts.bias(head, i, j);
                        max = max.max(row[j]);
                    }
                    let mut sum = F::zero();
                    for j in 0..=i {
                        let e = (row[j] - max).exp();
                        // keep probabilities out of subnormal range
                        row[j] = if e < tiny { F::zero() } else { e };
                        sum += row[j];
                    }
                    for j in 0..t {
                        row[j] = if j <= i { row[j] / sum } else { F::zero() };
                    }
                }
                attn.slice_mut(s![rows.clone(), cols]).assign(&p.dot(&vh));
                per_head.push(p);
            }
            probs.push(per_head);
        }
        x += &attn.dot(&lw.wo);
        let x_mid = x.clone();
        let (h2, inv2) = rms_norm(x.view(), lw.ffn_norm.view());
        let up = h2.dot(&lw.w_up);
        let act = up.mapv(silu);
        x += &act.dot(&lw.w_down);
        layers.push(LayerTape { x_in, inv1, h, q, k, v, probs, attn, x_mid, inv2, h2, up, act });
    }

    let (hf, inv_f) = rms_norm(x.view(), w.final_norm.view());
    let mut scored = Vec::new();
    let mut targets = Vec::new();
    for (bi, (m, tg)) in batch.mask.iter().zip(&batch.targets).enumerate() {
        for ti in 0..t {
            if m[ti] {
                scored.push(bi * t + ti);
                targets.push(tg[ti] as usize);
            }
        }
    }
    let hs = hf.select(Axis(0), &scored);
    let mut probs = hs.dot(&w.lm_head);
    let mut total = F::zero();
    for (mut row, &target) in probs.rows_mut().into_iter().zip(&targets) {
        let max = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|z| {
            let e = (z - max).exp();
            if e < tiny {
                F::zero()
            } else {
                e
            }
        });
        let sum = row.sum();
        row.mapv_inplace(|z| z / sum);
        total -= row[target].ln();
    }
    let loss = total / F::of(scored.len() as f64);
    if !loss.is_finite() {
        return Err(Error::Numeric("training loss is not finite".into()));
    }
    Ok(Tape { layers, x_final: x, inv_f, hf, scored, targets, probs, loss })
}

/// Backward through `y = x * inv_rms * gain`. Accumulates into `dgain` and
/// returns `dx`.
fn rms_norm_backward<F: Scalar>(
    x: ArrayView2<'_, F>,
    inv: &[F],
    gain: &Array1<F>,
    dy: ArrayView2<'_, F>,
    dgain: &mut Array1<F>,
) -> Array2<F> {
    let n = F::of(x.ncols() as f64);
    let mut dx = Array2::zeros(x.raw_dim());
    for (((xr, dyr), mut dxr), &r) in x.rows().into_iter().zip(dy.rows()).zip(dx.rows_mut()).zip(inv) {
        let mut proj = F::zero();
        Zip::from(&xr).and(&dyr).and(&mut *dgain).and(gain).for_each(|&xv, &dv, dg, &g| {
            *dg += dv * xv * r;
            proj += dv * g * xv;
        });
        let c = r * r * r * proj / n;
        Zip::from(&mut dxr).and(&xr).and(&dyr).and(gain).for_each(|o, &xv, &dv, &g| {
            *o = r * dv * g - c * xv;
        });
    }
    dx
}

/// `acc += a^T b`
fn add_at_b<F: Scalar>(acc: &mut Array2<F>, a: ArrayView2<'_, F>, b: ArrayView2<'_, F>) {
    ndarray::linalg::general_mat_mul(F::one(), &a.t(), &b, F::one(), acc);
}

fn backward<F: Scalar>(w: &Weights<F>, batch: &Batch, tape: &Tape<F>) -> Result<Weights<F>> {
    let cfg = &w.config;
    let consts = Consts::new(w)?;
    let (b, t) = (batch.inputs.len(), batch.seq_len());
    let (n_heads, d) = (cfg.n_heads, cfg.head_dim);
    let mut g = zero_grad(w)?;

    // d loss / d logits = (p - onehot) / n
    let n = F::of(tape.scored.len() as f64);
    let mut dlogits = tape.probs.clone();
    for (mut row, &target) in dlogits.rows_mut().into_iter().zip(&tape.targets) {
        row[target] -= F::one();
        row.mapv_inplace(|v| v / n);
    }
    let hs = tape.hf.select(Axis(0), &tape.scored);
    add_at_b(&mut g.lm_head, hs.view(), dlogits.view());
    let dhs = dlogits.dot(&w.lm_head.t());
    let mut dhf = Array2::<F>::zeros(tape.hf.raw_dim());
    for (&r, row) in tape.scored.iter().zip(dhs.rows()) {
        dhf.row_mut(r).assign(&row);
    }
    let mut dx = rms_norm_backward(tape.x_final.view(), &tape.inv_f, &w.final_norm, dhf.view(), &mut g.final_norm);

    for (li, (lw, lt)) in w.layers.iter().zip(&tape.layers).enumerate().rev() {
        let lg = &mut g.layers[li];
        // feed-forward
        add_at_b(&mut lg.w_down, lt.act.view(), dx.view());
        let mut dup = dx.dot(&lw.w_down.t());
        Zip::from(&mut dup).and(&lt.up).for_each(|dv, &u| *dv *= silu_grad(u));
        add_at_b(&mut lg.w_up, lt.h2.view(), dup.view());
        let dh2 = dup.dot(&lw.w_up.t());
        dx += &rms_norm_backward(lt.x_mid.view(), &lt.inv2, &lw.ffn_norm, dh2.view(), &mut lg.ffn_norm);

        // attention
        add_at_b(&mut lg.wo, lt.attn.view(), dx.view());
        let dattn = dx.dot(&lw.wo.t());
        let mut dq = Array2::<F>::zeros(lt.q.raw_dim());
        let mut dk = Array2::<F>::zeros(lt.k.raw_dim());
        let mut dv = Array2::<F>::zeros(lt.v.raw_dim());
        for bi in 0..b {
            let rows = bi * t..(bi + 1) * t;
            for head in 0..n_heads {
                let cols = head * d..(head + 1) * d;
                let p = &lt.probs[bi][head];
                let qh = lt.q.slice(s![rows.clone(), cols.clone()]);
                let kh = lt.k.slice(s![rows.clone(), cols.clone()]);
                let vh = lt.v.slice(s![rows.clone(), cols.clone()]);
                let dout = dattn.slice(s![rows.clone(), cols.clone()]);
                dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&dout));
                let mut ds = dout.dot(&vh.t());
                softmax_backward(p.view(), ds.view_mut(), consts.scale);
                dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
                dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
            }
        }
        consts.rotate(&mut dq, t, n_heads, d, -F::one());
        consts.rotate(&mut dk, t, n_heads, d, -F::one());
        add_at_b(&mut lg.wq, lt.h.view(), dq.view());
        add_at_b(&mut lg.wk, lt.h.view(), dk.view());
        add_at_b(&mut lg.wv, lt.h.view(), dv.view());
        let dh = dq.dot(&lw.wq.t()) + dk.dot(&lw.wk.t()) + dv.dot(&lw.wv.t());
        dx += &rms_norm_backward(lt.x_in.view(), &lt.inv1, &lw.attn_norm, dh.view(), &mut lg.attn_norm);
    }

    for (row, &tok) in dx.rows().into_iter().zip(batch.inputs.iter().flatten()) {
        let mut e = g.embedding.row_mut(tok as usize);
        e += &row;
    }
    Ok(g)
}

/// Turns `dP` into `dS * scale` in place, where `P = softmax(S * scale + bias)`.
fn softmax_backward<F: Scalar>(p: ArrayView2<'_, F>, mut dp: ArrayViewMut2<'_, F>, scale: F) {
    for (pr, mut dr) in p.rows().into_iter().zip(dp.rows_mut()) {
        let dot = pr.iter().zip(dr.iter()).fold(F::zero(), |a, (&pv, &dv)| a + pv * dv);
        Zip::from(&mut dr).and(&pr).for_each(|dv, &pv| *dv = pv * (*dv - dot) * scale);
    }
}

/// All-zero tensors shaped like `w`.
pub fn zero_grad<F: Scalar>(w: &Weights<F>) -> Result<Weights<F>> {
    let mut g = Weights::<F>::zeros(&w.config)?;
    for s in g.slices_mut() {
        s.fill(F::zero());
    }
    Ok(g)
}
