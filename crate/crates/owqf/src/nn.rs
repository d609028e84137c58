//! Parameter storage, optimizer, and composite layers.
//!
//! Model parameters live in a [`ParamStore`] between steps; every forward
//! pass injects them into a fresh [`Tape`] through a [`Frame`], which also
//! routes gradients back after `backward`. Injecting a frozen parameter
//! produces a constant node, so frozen gradients are never materialized.
//! Composite layers are pure compositions of tape primitives.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Consistency(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Precondition(format!(
                "parameter {name}: shape {shape:?} wants {n} values, got {}",
                data.len()
            )));
        }
        let len = data.len();
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            data,
            trainable: true,
            m: vec![0.0; len],
            v: vec![0.0; len],
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.entries[id].data
    }

    pub fn set_data(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        if data.len() != self.entries[id].data.len() {
            return Err(Error::Precondition(format!(
                "parameter {}: cannot replace {} values with {}",
                self.entries[id].name,
                self.entries[id].data.len(),
                data.len()
            )));
        }
        self.entries[id].data = data;
        Ok(())
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.trainable = false;
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .collect()
    }

    /// Reset optimizer moments (used when a new training stage begins).
    pub fn reset_optimizer(&mut self) {
        for e in &mut self.entries {
            e.m.iter_mut().for_each(|x| *x = 0.0);
            e.v.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Per-tape injection record mapping store parameters to tape nodes.
/// Re-injecting the same parameter returns the existing node, so weight
/// sharing accumulates gradients naturally.
#[derive(Default)]
pub struct Frame {
    map: BTreeMap<ParamId, TensorId>,
}

impl Frame {
    pub fn new() -> Self {
        Frame::default()
    }

    pub fn inject(&mut self, store: &ParamStore, tape: &mut Tape, pid: ParamId) -> Result<TensorId> {
        if let Some(&tid) = self.map.get(&pid) {
            return Ok(tid);
        }
        let e = store.entry(pid);
        let tid = if e.trainable {
            tape.param(e.shape.clone(), e.data.clone())?
        } else {
            tape.value(e.shape.clone(), e.data.clone())?
        };
        self.map.insert(pid, tid);
        Ok(tid)
    }

    /// Accumulate this tape's parameter gradients into `accum`.
    pub fn collect(&self, tape: &Tape, accum: &mut GradAccum) {
        for (&pid, &tid) in &self.map {
            if let Some(g) = tape.grad(tid) {
                accum.add(pid, g);
            }
        }
    }
}

/// Gradient accumulator across a batch of tapes, keyed by parameter id.
#[derive(Default)]
pub struct GradAccum {
    grads: BTreeMap<ParamId, Vec<f64>>,
}

impl GradAccum {
    pub fn new() -> Self {
        GradAccum::default()
    }

    pub fn add(&mut self, pid: ParamId, g: &[f64]) {
        match self.grads.get_mut(&pid) {
            Some(slot) => {
                for (s, v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
            None => {
                self.grads.insert(pid, g.to_vec());
            }
        }
    }

    pub fn get(&self, pid: ParamId) -> Option<&[f64]> {
        self.grads.get(&pid).map(|v| v.as_slice())
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.values_mut() {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Adam with standard decay baselines.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    /// Apply accumulated gradients to trainable parameters. Parameters not
    /// present in the accumulator (e.g. unused this batch) are skipped.
    pub fn step(&mut self, store: &mut ParamStore, accum: &GradAccum) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for id in 0..store.entries.len() {
            if !store.entries[id].trainable {
                continue;
            }
            let Some(g) = accum.get(id) else { continue };
            let e = &mut store.entries[id];
            for i in 0..e.data.len() {
                e.m[i] = self.beta1 * e.m[i] + (1.0 - self.beta1) * g[i];
                e.v[i] = self.beta2 * e.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = e.m[i] / bc1;
                let vhat = e.v[i] / bc2;
                e.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Xavier-uniform init.
pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect()
}

// ---- weight bundles -------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let w = store.add(&format!("{name}.w"), vec![d_in, d_out], xavier(rng, d_in, d_out))?;
        let b = store.add(&format!("{name}.b"), vec![d_out], vec![0.0; d_out])?;
        Ok(LinearParams { w, b })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn init(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        let gain = store.add(&format!("{name}.gain"), vec![d], vec![1.0; d])?;
        let bias = store.add(&format!("{name}.bias"), vec![d], vec![0.0; d])?;
        Ok(LayerNormParams { gain, bias })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

/// Bias-free projection weights for multi-head attention. Keeping the
/// projections bias-free makes a fully masked query row produce an exactly
/// zero output vector.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        let mk = |suffix: &str, store: &mut ParamStore, rng: &mut ChaCha8Rng| {
            store.add(&format!("{name}.{suffix}"), vec![d, d], xavier(rng, d, d))
        };
        Ok(AttentionParams {
            wq: mk("wq", store, rng)?,
            wk: mk("wk", store, rng)?,
            wv: mk("wv", store, rng)?,
            wo: mk("wo", store, rng)?,
            heads,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.wq, self.wk, self.wv, self.wo]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub lin1: LinearParams,
    pub lin2: LinearParams,
}

impl FfnParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(FfnParams {
            lin1: LinearParams::init(store, rng, &format!("{name}.lin1"), d, hidden)?,
            lin2: LinearParams::init(store, rng, &format!("{name}.lin2"), hidden, d)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.lin1.ids();
        v.extend(self.lin2.ids());
        v
    }
}

/// Two-layer MLP head `d -> d -> out` with relu. `zero_out` zeroes the final
/// layer so the head starts as the identity on whatever it is added to.
#[derive(Debug, Clone, Copy)]
pub struct MlpHeadParams {
    pub lin1: LinearParams,
    pub lin2: LinearParams,
}

impl MlpHeadParams {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        out: usize,
        zero_out: bool,
    ) -> Result<Self> {
        let lin1 = LinearParams::init(store, rng, &format!("{name}.lin1"), d, d)?;
        let lin2 = if zero_out {
            let w = store.add(&format!("{name}.lin2.w"), vec![d, out], vec![0.0; d * out])?;
            let b = store.add(&format!("{name}.lin2.b"), vec![out], vec![0.0; out])?;
            LinearParams { w, b }
        } else {
            LinearParams::init(store, rng, &format!("{name}.lin2"), d, out)?
        };
        Ok(MlpHeadParams { lin1, lin2 })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.lin1.ids();
        v.extend(self.lin2.ids());
        v
    }
}

// ---- composite forwards ----------------------------------------------------

pub fn linear(tape: &mut Tape, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

pub fn mlp_head(
    tape: &mut Tape,
    x: TensorId,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
) -> Result<TensorId> {
    let h = linear(tape, x, w1, Some(b1))?;
    let h = tape.relu(h);
    linear(tape, h, w2, Some(b2))
}

pub fn ffn(
    tape: &mut Tape,
    x: TensorId,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
) -> Result<TensorId> {
    mlp_head(tape, x, w1, b1, w2, b2)
}

/// Injected attention weights on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub heads: usize,
}

impl AttnWeights {
    pub fn inject(
        p: &AttentionParams,
        frame: &mut Frame,
        store: &ParamStore,
        tape: &mut Tape,
    ) -> Result<Self> {
        Ok(AttnWeights {
            wq: frame.inject(store, tape, p.wq)?,
            wk: frame.inject(store, tape, p.wk)?,
            wv: frame.inject(store, tape, p.wv)?,
            wo: frame.inject(store, tape, p.wo)?,
            heads: p.heads,
        })
    }
}

/// Multi-head attention over row-major token matrices.
///
/// `q` is `[Lq, d]`, `k`/`v` are `[Lk, d]`; the optional mask is `[Lq * Lk]`
/// with `true` = blocked, shared across heads. Scores are scaled by
/// `1/sqrt(d/heads)`; a fully blocked query row yields a zero output row.
pub fn multi_head_attention(
    tape: &mut Tape,
    w: &AttnWeights,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    mask: Option<&[bool]>,
) -> Result<TensorId> {
    let d = *tape.shape(q).last().ok_or_else(|| {
        Error::Precondition("attention query must have a feature axis".into())
    })?;
    if w.heads == 0 || d % w.heads != 0 {
        return Err(Error::Precondition(format!(
            "model width {d} not divisible by {} heads",
            w.heads
        )));
    }
    let hd = d / w.heads;
    let scale = 1.0 / (hd as f64).sqrt();

    let qp = tape.matmul(q, w.wq)?;
    let kp = tape.matmul(k, w.wk)?;
    let vp = tape.matmul(v, w.wv)?;

    let mut heads_out = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let qh = tape.slice_cols(qp, h * hd, hd)?;
        let kh = tape.slice_cols(kp, h * hd, hd)?;
        let vh = tape.slice_cols(vp, h * hd, hd)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale);
        let attn = match mask {
            Some(m) => tape.masked_softmax_rows(scaled, m)?,
            None => tape.softmax(scaled, 1)?,
        };
        heads_out.push(tape.matmul(attn, vh)?);
    }
    let cat = tape.concat_cols(&heads_out)?;
    tape.matmul(cat, w.wo)
}

/// Sinusoidal encoding of per-row coordinate tuples.
///
/// `coords` is `[T, c]` with values in [0, 1]; the output is `[T, d]` where
/// each coordinate owns `d / c` channels split evenly between sin and cos at
/// geometrically spaced frequencies. Differentiable in `coords`.
pub fn sinusoidal_encoding(tape: &mut Tape, coords: TensorId, d: usize) -> Result<TensorId> {
    let shape = tape.shape(coords).to_vec();
    let [_t, c] = shape[..] else {
        return Err(Error::shape("sinusoidal_encoding", &shape, &[]));
    };
    if c == 0 || d % (2 * c) != 0 {
        return Err(Error::Precondition(format!(
            "encoding width {d} must be a multiple of 2 * {c} coordinates"
        )));
    }
    let f = d / (2 * c);
    let freqs: Vec<f64> = (0..f)
        .map(|k| 2.0 * std::f64::consts::PI * 10000f64.powf(-(k as f64) / f as f64))
        .collect();
    let freq_row = tape.value(vec![1, f], freqs)?;
    let mut parts = Vec::with_capacity(2 * c);
    for ci in 0..c {
        let col = tape.slice_cols(coords, ci, 1)?;
        let angles = tape.matmul(col, freq_row)?;
        parts.push(tape.sin(angles));
        parts.push(tape.cos(angles));
    }
    tape.concat_cols(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;

    fn seeded(n: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(n)
    }

    /// Scalar reference attention for one head, no mask.
    fn naive_attention(
        q: &[f64],
        k: &[f64],
        v: &[f64],
        lq: usize,
        lk: usize,
        d: usize,
        heads: usize,
        wq: &[f64],
        wk: &[f64],
        wv: &[f64],
        wo: &[f64],
    ) -> Vec<f64> {
        let proj = |x: &[f64], w: &[f64], rows: usize| -> Vec<f64> {
            let mut out = vec![0.0; rows * d];
            for i in 0..rows {
                for j in 0..d {
                    for p in 0..d {
                        out[i * d + j] += x[i * d + p] * w[p * d + j];
                    }
                }
            }
            out
        };
        let qp = proj(q, wq, lq);
        let kp = proj(k, wk, lk);
        let vp = proj(v, wv, lk);
        let hd = d / heads;
        let mut concat = vec![0.0; lq * d];
        for h in 0..heads {
            for i in 0..lq {
                let mut scores = vec![0.0; lk];
                for j in 0..lk {
                    let mut s = 0.0;
                    for p in 0..hd {
                        s += qp[i * d + h * hd + p] * kp[j * d + h * hd + p];
                    }
                    scores[j] = s / (hd as f64).sqrt();
                }
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut den = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    den += *s;
                }
                for s in scores.iter_mut() {
                    *s /= den;
                }
                for p in 0..hd {
                    let mut acc = 0.0;
                    for j in 0..lk {
                        acc += scores[j] * vp[j * d + h * hd + p];
                    }
                    concat[i * d + h * hd + p] = acc;
                }
            }
        }
        proj(&concat, wo, lq)
    }

    #[test]
    fn attention_matches_scalar_reference() {
        let mut rng = seeded(11);
        let (lq, lk, d, heads) = (4, 5, 8, 2);
        let q: Vec<f64> = (0..lq * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..lk * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..lk * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wq = xavier(&mut rng, d, d);
        let wk = xavier(&mut rng, d, d);
        let wv = xavier(&mut rng, d, d);
        let wo = xavier(&mut rng, d, d);

        let mut tape = Tape::new();
        let qt = tape.value(vec![lq, d], q.clone()).unwrap();
        let kt = tape.value(vec![lk, d], k.clone()).unwrap();
        let vt = tape.value(vec![lk, d], v.clone()).unwrap();
        let w = AttnWeights {
            wq: tape.value(vec![d, d], wq.clone()).unwrap(),
            wk: tape.value(vec![d, d], wk.clone()).unwrap(),
            wv: tape.value(vec![d, d], wv.clone()).unwrap(),
            wo: tape.value(vec![d, d], wo.clone()).unwrap(),
            heads,
        };
        let out = multi_head_attention(&mut tape, &w, qt, kt, vt, None).unwrap();
        let expect = naive_attention(&q, &k, &v, lq, lk, d, heads, &wq, &wk, &wv, &wo);
        for (a, b) in tape.data(out).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_single_token_identity_projections() {
        // One key/value token and identity-like weights: the output is the
        // value row itself regardless of the query.
        let d = 4;
        let eye: Vec<f64> = (0..d * d)
            .map(|i| if i / d == i % d { 1.0 } else { 0.0 })
            .collect();
        let mut tape = Tape::new();
        let q = tape.value(vec![1, d], vec![0.3, -0.7, 0.2, 0.9]).unwrap();
        let k = tape.value(vec![1, d], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = tape.value(vec![1, d], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let w = AttnWeights {
            wq: tape.value(vec![d, d], eye.clone()).unwrap(),
            wk: tape.value(vec![d, d], eye.clone()).unwrap(),
            wv: tape.value(vec![d, d], eye.clone()).unwrap(),
            wo: tape.value(vec![d, d], eye).unwrap(),
            heads: 1,
        };
        let out = multi_head_attention(&mut tape, &w, q, k, v, None).unwrap();
        assert_eq!(tape.data(out), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn attention_fully_masked_row_is_zero() {
        let mut rng = seeded(3);
        let d = 4;
        let mut tape = Tape::new();
        let q = tape
            .value(vec![2, d], (0..2 * d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let k = tape
            .value(vec![3, d], (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let v = tape
            .value(vec![3, d], (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let w = AttnWeights {
            wq: tape.value(vec![d, d], xavier(&mut rng, d, d)).unwrap(),
            wk: tape.value(vec![d, d], xavier(&mut rng, d, d)).unwrap(),
            wv: tape.value(vec![d, d], xavier(&mut rng, d, d)).unwrap(),
            wo: tape.value(vec![d, d], xavier(&mut rng, d, d)).unwrap(),
            heads: 2,
        };
        // Row 0 fully blocked, row 1 open.
        let mask = vec![true, true, true, false, false, false];
        let out = multi_head_attention(&mut tape, &w, q, k, v, Some(&mask)).unwrap();
        for j in 0..d {
            assert_eq!(tape.data(out)[j], 0.0, "fully masked row must be zero");
        }
        assert!(tape.data(out)[d..].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn attention_grad_check() {
        let mut rng = seeded(17);
        let (lq, lk, d, heads) = (3, 4, 8, 2);
        let params = vec![
            (vec![lq, d], (0..lq * d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()),
            (vec![lk, d], (0..lk * d).map(|_| rng.random_range(-1.0..1.0)).collect()),
            (vec![d, d], xavier(&mut rng, d, d)),
            (vec![d, d], xavier(&mut rng, d, d)),
            (vec![d, d], xavier(&mut rng, d, d)),
            (vec![d, d], xavier(&mut rng, d, d)),
        ];
        let mask: Vec<bool> = (0..lq * lk).map(|i| i % 5 == 0).collect();
        let report = grad_check(&params, |t, ids| {
            let w = AttnWeights {
                wq: ids[2],
                wk: ids[3],
                wv: ids[4],
                wo: ids[5],
                heads,
            };
            let out = multi_head_attention(t, &w, ids[0], ids[1], ids[1], Some(&mask))?;
            let sq = t.mul(out, out)?;
            Ok(t.sum_all(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn frame_reinjects_same_node_and_shares_grads() {
        let mut store = ParamStore::new();
        let w = store.add("w", vec![2, 2], vec![0.5, -0.3, 0.8, 0.1]).unwrap();
        let mut tape = Tape::new();
        let mut frame = Frame::new();
        let t1 = frame.inject(&store, &mut tape, w).unwrap();
        let t2 = frame.inject(&store, &mut tape, w).unwrap();
        assert_eq!(t1, t2, "same parameter injects once per frame");

        let x = tape.value(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y1 = tape.matmul(x, t1).unwrap();
        let y2 = tape.matmul(y1, t2).unwrap();
        let loss = tape.sum_all(y2);
        tape.backward(loss).unwrap();
        let mut accum = GradAccum::new();
        frame.collect(&tape, &mut accum);
        assert!(accum.get(w).is_some());
    }

    #[test]
    fn frozen_params_never_materialize_grads() {
        let mut store = ParamStore::new();
        let w = store.add("w", vec![2], vec![1.0, 2.0]).unwrap();
        store.set_trainable(w, false);
        let mut tape = Tape::new();
        let mut frame = Frame::new();
        let t = frame.inject(&store, &mut tape, w).unwrap();
        let sq = tape.mul(t, t).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert!(tape.grad(t).is_none());
        let mut accum = GradAccum::new();
        frame.collect(&tape, &mut accum);
        assert!(accum.is_empty());
    }

    #[test]
    fn adam_descends_on_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("p", vec![2], vec![5.0, -3.0]).unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g: Vec<f64> = store.data(p).iter().map(|x| 2.0 * x).collect();
            let mut accum = GradAccum::new();
            accum.add(p, &g);
            opt.step(&mut store, &accum);
        }
        assert!(store.data(p).iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn sinusoidal_encoding_shape_and_range() {
        let mut tape = Tape::new();
        let coords = tape
            .value(vec![3, 4], vec![0.1, 0.5, 0.2, 0.3, 0.9, 0.05, 0.5, 0.5, 0.0, 1.0, 0.25, 0.75])
            .unwrap();
        let enc = sinusoidal_encoding(&mut tape, coords, 16).unwrap();
        assert_eq!(tape.shape(enc), &[3, 16]);
        assert!(tape.data(enc).iter().all(|v| v.abs() <= 1.0 + 1e-12));
        // Distinct coordinate rows encode distinctly.
        let r0 = &tape.data(enc)[0..16];
        let r1 = &tape.data(enc)[16..32];
        assert!(r0 != r1);
    }

    #[test]
    fn sinusoidal_encoding_grad_check() {
        let params = vec![(vec![2, 4], vec![0.3, 0.6, 0.2, 0.8, 0.5, 0.1, 0.9, 0.4])];
        let report = grad_check(&params, |t, ids| {
            let enc = sinusoidal_encoding(t, ids[0], 16)?;
            let sq = t.mul(enc, enc)?;
            Ok(t.sum_all(sq))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}
