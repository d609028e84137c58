//! Query-fusion decoder stack.
//!
//! Queries are one concatenated token matrix `[denoising | general | specific]`
//! flowing through shared layers; the partition only matters twice per layer:
//! the self-attention mask (noise groups are mutually invisible, matched
//! queries cannot see noise), and the box refinement heads, where denoising
//! and general rows share one head and specific rows use the other.
//!
//! Each layer re-derives positional encodings from the current boxes by
//! sigmoid — no detaching — so box gradients flow through the geometry as
//! well as the heads. Box updates are additive in logit space; heads start
//! zeroed, making a fresh stack's box trajectory exactly constant.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    ffn, mlp_head, multi_head_attention, sinusoidal_encoding, AttentionParams, AttnWeights,
    FfnParams, Frame, LayerNormParams, MlpHeadParams, ParamId, ParamStore,
};
use crate::tensor::{Tape, TensorId};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub self_attn: AttentionParams,
    pub norm_self: LayerNormParams,
    pub cross_text: AttentionParams,
    pub norm_text: LayerNormParams,
    pub cross_image: AttentionParams,
    pub norm_image: LayerNormParams,
    pub ffn: FfnParams,
    pub norm_ffn: LayerNormParams,
    /// Refines denoising and general rows; zero-initialized.
    pub box_head_general: MlpHeadParams,
    /// Refines specific rows; zero-initialized.
    pub box_head_specific: MlpHeadParams,
}

impl FusionLayer {
    fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(FusionLayer {
            self_attn: AttentionParams::init(store, rng, &format!("{name}.self_attn"), d, heads)?,
            norm_self: LayerNormParams::init(store, &format!("{name}.norm_self"), d)?,
            cross_text: AttentionParams::init(store, rng, &format!("{name}.cross_text"), d, heads)?,
            norm_text: LayerNormParams::init(store, &format!("{name}.norm_text"), d)?,
            cross_image: AttentionParams::init(store, rng, &format!("{name}.cross_image"), d, heads)?,
            norm_image: LayerNormParams::init(store, &format!("{name}.norm_image"), d)?,
            ffn: FfnParams::init(store, rng, &format!("{name}.ffn"), d, 2 * d)?,
            norm_ffn: LayerNormParams::init(store, &format!("{name}.norm_ffn"), d)?,
            box_head_general: MlpHeadParams::init(
                store,
                rng,
                &format!("{name}.box_head_general"),
                d,
                4,
                true,
            )?,
            box_head_specific: MlpHeadParams::init(
                store,
                rng,
                &format!("{name}.box_head_specific"),
                d,
                4,
                true,
            )?,
        })
    }

    fn all_ids(&self) -> Vec<ParamId> {
        let mut v = self.self_attn.ids();
        v.extend(self.norm_self.ids());
        v.extend(self.cross_text.ids());
        v.extend(self.norm_text.ids());
        v.extend(self.cross_image.ids());
        v.extend(self.norm_image.ids());
        v.extend(self.ffn.ids());
        v.extend(self.norm_ffn.ids());
        v.extend(self.box_head_general.ids());
        v.extend(self.box_head_specific.ids());
        v
    }

    fn adaptation_ids(&self) -> Vec<ParamId> {
        let mut v = self.self_attn.ids();
        v.extend(self.box_head_general.ids());
        v.extend(self.box_head_specific.ids());
        v
    }
}

#[derive(Debug, Clone)]
pub struct DecoderStack {
    pub layers: Vec<FusionLayer>,
    pub d: usize,
    pub heads: usize,
}

impl DecoderStack {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
        n_layers: usize,
    ) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| FusionLayer::init(store, rng, &format!("{name}.layer{i}"), d, heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecoderStack { layers, d, heads })
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.all_ids()).collect()
    }

    /// The parameters that stay trainable when the stack is adapted to point
    /// prompts: self-attention projections and both box heads, per layer.
    /// Everything else in the stack — cross-attention, FFN, norms — freezes.
    pub fn freeze_mask(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.adaptation_ids()).collect()
    }

    /// Freeze the stack for adaptation: only `freeze_mask` stays trainable.
    pub fn apply_adaptation_freeze(&self, store: &mut ParamStore) {
        for id in self.all_ids() {
            store.set_trainable(id, false);
        }
        for id in self.freeze_mask() {
            store.set_trainable(id, true);
        }
    }
}

/// Query partition sizes, in row order.
#[derive(Debug, Clone, Copy, Default)]
pub struct Partition {
    pub n_dn: usize,
    pub n_general: usize,
    pub n_specific: usize,
}

impl Partition {
    pub fn total(&self) -> usize {
        self.n_dn + self.n_general + self.n_specific
    }
}

#[derive(Debug, Clone)]
pub struct DecodeInputs<'a> {
    /// `[q, d]` query content.
    pub content: TensorId,
    /// `[q, 4]` logit-space boxes.
    pub box_logits: TensorId,
    /// `[c, d]` projected text features.
    pub text_feats: TensorId,
    /// `[t, d]` flattened pyramid features.
    pub image_feats: TensorId,
    /// `[t, d]` positional encodings of the pyramid cells.
    pub image_pos: TensorId,
    /// Optional `[q * q]` self-attention mask, true = blocked.
    pub self_mask: Option<&'a [bool]>,
    pub partition: Partition,
}

/// Per-layer outputs; box logits are post-refinement.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    pub content: TensorId,
    pub box_logits: TensorId,
}

fn residual_norm(
    tape: &mut Tape,
    frame: &mut Frame,
    store: &ParamStore,
    x: TensorId,
    delta: TensorId,
    norm: &LayerNormParams,
) -> Result<TensorId> {
    let summed = tape.add(x, delta)?;
    let gain = frame.inject(store, tape, norm.gain)?;
    let bias = frame.inject(store, tape, norm.bias)?;
    tape.layer_norm(summed, gain, bias, LN_EPS)
}

/// Run the stack over the fused query set, returning one trace per layer.
/// A zero-layer stack returns no traces: the inputs are the outputs.
pub fn decode(
    tape: &mut Tape,
    frame: &mut Frame,
    store: &ParamStore,
    stack: &DecoderStack,
    inputs: &DecodeInputs,
) -> Result<Vec<LayerTrace>> {
    let q = inputs.partition.total();
    let content_shape = tape.shape(inputs.content).to_vec();
    let box_shape = tape.shape(inputs.box_logits).to_vec();
    if content_shape != vec![q, stack.d] {
        return Err(Error::Precondition(format!(
            "content shape {content_shape:?} does not match partition total {q} x d {}",
            stack.d
        )));
    }
    if box_shape != vec![q, 4] {
        return Err(Error::Precondition(format!(
            "box logits shape {box_shape:?}, expected [{q}, 4]"
        )));
    }
    if q == 0 {
        return Err(Error::Precondition("decoder needs at least one query".into()));
    }
    if let Some(m) = inputs.self_mask {
        if m.len() != q * q {
            return Err(Error::Precondition(format!(
                "self mask has {} entries for {q} queries",
                m.len()
            )));
        }
    }

    let mut content = inputs.content;
    let mut box_logits = inputs.box_logits;
    let mut traces = Vec::with_capacity(stack.layers.len());
    for layer in &stack.layers {
        // Positional encodings from the current boxes, through sigmoid, so
        // refinement gradients flow into earlier layers' geometry.
        let boxes = tape.sigmoid(box_logits);
        let pos = sinusoidal_encoding(tape, boxes, stack.d)?;

        let qk = tape.add(content, pos)?;
        let sa_w = AttnWeights::inject(&layer.self_attn, frame, store, tape)?;
        let sa = multi_head_attention(tape, &sa_w, qk, qk, content, inputs.self_mask)?;
        content = residual_norm(tape, frame, store, content, sa, &layer.norm_self)?;

        let ct_w = AttnWeights::inject(&layer.cross_text, frame, store, tape)?;
        let ct = multi_head_attention(
            tape,
            &ct_w,
            content,
            inputs.text_feats,
            inputs.text_feats,
            None,
        )?;
        content = residual_norm(tape, frame, store, content, ct, &layer.norm_text)?;

        let qi = tape.add(content, pos)?;
        let ki = tape.add(inputs.image_feats, inputs.image_pos)?;
        let ci_w = AttnWeights::inject(&layer.cross_image, frame, store, tape)?;
        let ci = multi_head_attention(tape, &ci_w, qi, ki, inputs.image_feats, None)?;
        content = residual_norm(tape, frame, store, content, ci, &layer.norm_image)?;

        let w1 = frame.inject(store, tape, layer.ffn.lin1.w)?;
        let b1 = frame.inject(store, tape, layer.ffn.lin1.b)?;
        let w2 = frame.inject(store, tape, layer.ffn.lin2.w)?;
        let b2 = frame.inject(store, tape, layer.ffn.lin2.b)?;
        let f = ffn(tape, content, w1, b1, w2, b2)?;
        content = residual_norm(tape, frame, store, content, f, &layer.norm_ffn)?;

        let delta = partitioned_box_delta(tape, frame, store, layer, content, &inputs.partition)?;
        box_logits = tape.add(box_logits, delta)?;
        traces.push(LayerTrace { content, box_logits });
    }
    Ok(traces)
}

fn head_delta(
    tape: &mut Tape,
    frame: &mut Frame,
    store: &ParamStore,
    head: &MlpHeadParams,
    x: TensorId,
) -> Result<TensorId> {
    let w1 = frame.inject(store, tape, head.lin1.w)?;
    let b1 = frame.inject(store, tape, head.lin1.b)?;
    let w2 = frame.inject(store, tape, head.lin2.w)?;
    let b2 = frame.inject(store, tape, head.lin2.b)?;
    mlp_head(tape, x, w1, b1, w2, b2)
}

fn partitioned_box_delta(
    tape: &mut Tape,
    frame: &mut Frame,
    store: &ParamStore,
    layer: &FusionLayer,
    content: TensorId,
    p: &Partition,
) -> Result<TensorId> {
    let k_general = p.n_dn + p.n_general;
    let k_specific = p.n_specific;
    match (k_general > 0, k_specific > 0) {
        (true, true) => {
            let g = tape.slice_rows(content, 0, k_general)?;
            let dg = head_delta(tape, frame, store, &layer.box_head_general, g)?;
            let s = tape.slice_rows(content, k_general, k_specific)?;
            let ds = head_delta(tape, frame, store, &layer.box_head_specific, s)?;
            tape.concat_rows(&[dg, ds])
        }
        (true, false) => head_delta(tape, frame, store, &layer.box_head_general, content),
        (false, true) => head_delta(tape, frame, store, &layer.box_head_specific, content),
        (false, false) => unreachable!("decode rejects empty query sets"),
    }
}
