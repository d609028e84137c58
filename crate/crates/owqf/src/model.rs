//! The full open-world detector: a frozen-feature alignment core with two
//! query paths fused in one decoder.
//!
//! The specific path scores every pyramid cell against the text vocabulary
//! and promotes the top cells to queries (content from a learnable bank,
//! position from the cell anchor refined by the shared initial box head).
//! The general path turns prompt points into queries the same way — point
//! feature, same initial head, bank content assigned by score rank — so
//! anything the vocabulary misses can still be localized from a point.
//!
//! Two-stage training: grounding pretrain drives the specific path and the
//! shared scoring/box heads; adaptation then freezes everything except the
//! decoder's self-attention, its box heads, and the query banks, and trains
//! the general path with denoising points (or matched prompts when denoising
//! is disabled).

use serde::{Deserialize, Serialize};

use crate::decoder::{decode, DecodeInputs, DecoderStack, LayerTrace, Partition, LN_EPS};
use crate::denoise::{denoising_attention_mask, sample_groups, DenoisingConfig, NoisePoint};
use crate::error::{Error, Result};
use crate::geometry::Box;
use crate::loss::{denoising_loss, grounding_loss, LossReport, LossWeights, MatchedLoss};
use crate::nn::{
    linear, mlp_head, sinusoidal_encoding, Frame, LayerNormParams, LinearParams, MlpHeadParams,
    ParamStore,
};
use crate::prompt::PromptPoint;
use crate::query::{
    anchor_logits, flatten_pyramid, interpolate_point_feature, mix_seed, rank_and_match,
    QueryBank,
};
use crate::tensor::{Tape, TensorId};
use crate::world::{CategoryTable, FeaturePyramid, Scene};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::path::Path;

/// Which query paths participate, and how general slots are assigned.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathToggles {
    /// Point-prompted general queries (the open-world path).
    pub general: bool,
    /// Assign bank slots by score rank; off = arrival order.
    pub ranked: bool,
    /// Train the general path with denoising points instead of matched prompts.
    pub denoising: bool,
}

impl Default for PathToggles {
    fn default() -> Self {
        PathToggles { general: true, ranked: true, denoising: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Shared model width; must be a multiple of 8 (box encodings use 4
    /// coordinates, cell encodings 2).
    pub d: usize,
    pub heads: usize,
    pub n_layers: usize,
    /// General query bank size (slots for ranked point prompts).
    pub n_queries: usize,
    /// Specific queries promoted from the grid per image.
    pub n_specific: usize,
    /// Channel width of the feature pyramid this model consumes.
    pub feature_dim: usize,
    /// Width of the raw text embeddings.
    pub d_text: usize,
    pub dn: DenoisingConfig,
    /// Weight on the denoising term of the adaptation loss.
    pub dn_weight: f64,
    pub loss: LossWeights,
    pub toggles: PathToggles,
    /// Sum the projected point feature into point-query content (off: the
    /// feature only seeds the initial box, content is the bank slot alone).
    pub add_point_feature: bool,
    /// Charge the loss on every layer's outputs, not just the last.
    pub aux_loss: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            n_layers: 2,
            n_queries: 900,
            n_specific: 300,
            feature_dim: 64,
            d_text: 32,
            dn: DenoisingConfig::default(),
            dn_weight: 1.0,
            loss: LossWeights::default(),
            toggles: PathToggles::default(),
            add_point_feature: false,
            aux_loss: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 8 != 0 {
            return Err(Error::Config(format!(
                "model.d must be a positive multiple of 8, got {}",
                self.d
            )));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.heads must divide model.d ({} / {})",
                self.d, self.heads
            )));
        }
        if self.n_queries == 0 || self.n_specific == 0 {
            return Err(Error::Config(
                "model.n_queries and model.n_specific must be positive".into(),
            ));
        }
        if self.feature_dim == 0 || self.d_text == 0 {
            return Err(Error::Config(
                "model.feature_dim and model.d_text must be positive".into(),
            ));
        }
        if !(self.dn_weight.is_finite() && self.dn_weight >= 0.0) {
            return Err(Error::Config(format!(
                "model.dn_weight must be finite and nonnegative, got {}",
                self.dn_weight
            )));
        }
        self.dn.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Pretrain,
    Adapt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuerySource {
    General,
    Specific,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub box_: Box,
    pub score: f64,
    /// Index into the vocabulary the detector was scored against.
    pub label: usize,
    pub source: QuerySource,
}

#[derive(Debug, Clone)]
pub struct DetectConfig {
    pub score_threshold: f64,
    pub max_detections: usize,
    /// Drop a detection whose IoU with a kept same-label detection exceeds
    /// this; the query families overlap on shared objects. 1.0 disables.
    pub nms_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig { score_threshold: 0.05, max_detections: 100, nms_iou: 0.7 }
    }
}

#[derive(Clone)]
pub struct OpenWorldModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    input_proj: LinearParams,
    text_proj: LinearParams,
    adapter: LinearParams,
    adapter_norm: LayerNormParams,
    initial_head: MlpHeadParams,
    general_bank: QueryBank,
    specific_bank: QueryBank,
    pub stack: DecoderStack,
}

impl OpenWorldModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x6d6f_6465));
        let input_proj =
            LinearParams::init(&mut store, &mut rng, "input_proj", cfg.feature_dim, cfg.d)?;
        let text_proj = LinearParams::init(&mut store, &mut rng, "text_proj", cfg.d_text, cfg.d)?;
        let adapter = LinearParams::init(&mut store, &mut rng, "adapter", cfg.d, cfg.d)?;
        let adapter_norm = LayerNormParams::init(&mut store, "adapter_norm", cfg.d)?;
        let initial_head =
            MlpHeadParams::init(&mut store, &mut rng, "initial_head", cfg.d, 4, true)?;
        let general_bank =
            QueryBank::init(&mut store, &mut rng, "bank_general", cfg.n_queries, cfg.d)?;
        let specific_bank =
            QueryBank::init(&mut store, &mut rng, "bank_specific", cfg.n_specific, cfg.d)?;
        let stack = DecoderStack::init(&mut store, &mut rng, "stack", cfg.d, cfg.heads, cfg.n_layers)?;
        Ok(OpenWorldModel {
            cfg,
            store,
            input_proj,
            text_proj,
            adapter,
            adapter_norm,
            initial_head,
            general_bank,
            specific_bank,
            stack,
        })
    }

    /// Freeze for the adaptation stage: only the decoder's self-attention,
    /// its box heads, and the query banks keep training.
    pub fn freeze_for_adaptation(&mut self) {
        for name in self.store.names().map(str::to_string).collect::<Vec<_>>() {
            let id = self.store.id_of(&name).expect("listed name resolves");
            self.store.set_trainable(id, false);
        }
        self.stack.apply_adaptation_freeze(&mut self.store);
        self.store.set_trainable(self.general_bank.param, true);
        self.store.set_trainable(self.specific_bank.param, true);
        self.store.reset_optimizer();
    }

    /// Everything trains (pretrain stage).
    pub fn unfreeze_all(&mut self) {
        for name in self.store.names().map(str::to_string).collect::<Vec<_>>() {
            let id = self.store.id_of(&name).expect("listed name resolves");
            self.store.set_trainable(id, true);
        }
        self.store.reset_optimizer();
    }

    pub fn trainable_names(&self) -> BTreeSet<String> {
        self.store
            .names()
            .filter(|n| {
                let id = self.store.id_of(n).expect("listed name resolves");
                self.store.entry(id).trainable
            })
            .map(str::to_string)
            .collect()
    }

    fn alignment_logits(
        &self,
        tape: &mut Tape,
        frame: &mut Frame,
        content: TensorId,
        text_feats: TensorId,
    ) -> Result<TensorId> {
        let w = frame.inject(&self.store, tape, self.adapter.w)?;
        let b = frame.inject(&self.store, tape, self.adapter.b)?;
        let a = linear(tape, content, w, Some(b))?;
        let gain = frame.inject(&self.store, tape, self.adapter_norm.gain)?;
        let bias = frame.inject(&self.store, tape, self.adapter_norm.bias)?;
        let a = tape.layer_norm(a, gain, bias, LN_EPS)?;
        let tt = tape.transpose(text_feats)?;
        tape.matmul(a, tt)
    }

    fn initial_box_delta(
        &self,
        tape: &mut Tape,
        frame: &mut Frame,
        content: TensorId,
    ) -> Result<TensorId> {
        let w1 = frame.inject(&self.store, tape, self.initial_head.lin1.w)?;
        let b1 = frame.inject(&self.store, tape, self.initial_head.lin1.b)?;
        let w2 = frame.inject(&self.store, tape, self.initial_head.lin2.w)?;
        let b2 = frame.inject(&self.store, tape, self.initial_head.lin2.b)?;
        mlp_head(tape, content, w1, b1, w2, b2)
    }

    fn project_text(
        &self,
        tape: &mut Tape,
        frame: &mut Frame,
        vocab: &[Vec<f64>],
    ) -> Result<TensorId> {
        if vocab.is_empty() {
            return Err(Error::Precondition("empty text vocabulary".into()));
        }
        let d_text = self.cfg.d_text;
        let mut data = Vec::with_capacity(vocab.len() * d_text);
        for e in vocab {
            if e.len() != d_text {
                return Err(Error::Precondition(format!(
                    "text embedding width {} does not match model d_text {d_text}",
                    e.len()
                )));
            }
            data.extend_from_slice(e);
        }
        let raw = tape.value(vec![vocab.len(), d_text], data)?;
        let w = frame.inject(&self.store, tape, self.text_proj.w)?;
        let b = frame.inject(&self.store, tape, self.text_proj.b)?;
        linear(tape, raw, w, Some(b))
    }
}

/// Per-image tensors shared by every path: projected pyramid tokens, their
/// positional encodings, and the projected vocabulary.
struct ImageContext {
    image_feats: TensorId,
    image_pos: TensorId,
    text_feats: TensorId,
    cell_coords: Vec<(f64, f64)>,
}

impl OpenWorldModel {
    fn image_context(
        &self,
        tape: &mut Tape,
        frame: &mut Frame,
        pyramid: &FeaturePyramid,
        vocab: &[Vec<f64>],
    ) -> Result<ImageContext> {
        let flat = flatten_pyramid(pyramid)?;
        if flat.d != self.cfg.feature_dim {
            return Err(Error::Precondition(format!(
                "pyramid feature width {} does not match model feature_dim {}",
                flat.d, self.cfg.feature_dim
            )));
        }
        let raw = tape.value(vec![flat.t, flat.d], flat.features.clone())?;
        let w = frame.inject(&self.store, tape, self.input_proj.w)?;
        let b = frame.inject(&self.store, tape, self.input_proj.b)?;
        let image_feats = linear(tape, raw, w, Some(b))?;
        let mut coord_data = Vec::with_capacity(flat.t * 2);
        for &(x, y) in &flat.coords {
            coord_data.push(x);
            coord_data.push(y);
        }
        let coords = tape.value(vec![flat.t, 2], coord_data)?;
        let image_pos = sinusoidal_encoding(tape, coords, self.cfg.d)?;
        let text_feats = self.project_text(tape, frame, vocab)?;
        Ok(ImageContext {
            image_feats,
            image_pos,
            text_feats,
            cell_coords: flat.coords,
        })
    }

    /// Score every cell against the vocabulary and promote the top cells to
    /// specific queries. Returns (content, box logits, chosen cell indices).
    fn specific_queries(
        &self,
        tape: &mut Tape,
        frame: &mut Frame,
        ctx: &ImageContext,
    ) -> Result<(TensorId, TensorId, Vec<usize>)> {
        let cell_logits = self.alignment_logits(tape, frame, ctx.image_feats, ctx.text_feats)?;
        let best = tape.row_max(cell_logits)?;
        let scores: Vec<f64> = tape.data(best).to_vec();
        let chosen = rank_and_match(&scores, self.cfg.n_specific)?;
        let s = chosen.len();

        let cell_feats = tape.gather_rows(ctx.image_feats, &chosen)?;
        let delta = self.initial_box_delta(tape, frame, cell_feats)?;
        let points: Vec<(f64, f64)> = chosen.iter().map(|&i| ctx.cell_coords[i]).collect();
        let anchors = tape.value(vec![s, 4], anchor_logits(&points))?;
        let box_logits = tape.add(anchors, delta)?;

        let bank = self.specific_bank.inject(frame, &self.store, tape)?;
        let content = tape.slice_rows(bank, 0, s)?;
        Ok((content, box_logits, chosen))
    }

    /// Turn prompt points into general queries: bank content by rank plus
    /// the projected point feature, anchored at the point.
    fn general_queries(
        &self,
        tape: &mut Tape,
        frame: &mut Frame,
        pyramid: &FeaturePyramid,
        prompts: &[PromptPoint],
    ) -> Result<(TensorId, TensorId, Vec<usize>)> {
        let scores: Vec<f64> = prompts.iter().map(|p| p.score).collect();
        let order = if self.cfg.toggles.ranked {
            rank_and_match(&scores, self.general_bank.n)?
        } else {
            let mut o: Vec<usize> = (0..prompts.len()).collect();
            o.truncate(self.general_bank.n);
            o
        };
        let k = order.len();
        if k == 0 {
            return Err(Error::Precondition("no prompt points to build queries from".into()));
        }

        let mut feat_data = Vec::with_capacity(k * self.cfg.feature_dim);
        let mut points = Vec::with_capacity(k);
        for &pi in &order {
            let p = &prompts[pi];
            feat_data.extend(interpolate_point_feature(pyramid, p.x, p.y)?);
            points.push((p.x, p.y));
        }
        let raw = tape.value(vec![k, self.cfg.feature_dim], feat_data)?;
        let w = frame.inject(&self.store, tape, self.input_proj.w)?;
        let b = frame.inject(&self.store, tape, self.input_proj.b)?;
        let point_feats = linear(tape, raw, w, Some(b))?;

        let bank = self.general_bank.inject(frame, &self.store, tape)?;
        let slots = tape.slice_rows(bank, 0, k)?;
        let content = if self.cfg.add_point_feature {
            tape.add(slots, point_feats)?
        } else {
            slots
        };

        let delta = self.initial_box_delta(tape, frame, point_feats)?;
        let anchors = tape.value(vec![k, 4], anchor_logits(&points))?;
        let box_logits = tape.add(anchors, delta)?;
        Ok((content, box_logits, order))
    }

    /// Denoising queries from ground truth: one query per noise point,
    /// content from the general bank slot of its rank position, anchored at
    /// the noised point.
    fn denoising_queries(
        &self,
        tape: &mut Tape,
        frame: &mut Frame,
        pyramid: &FeaturePyramid,
        points: &[NoisePoint],
    ) -> Result<(TensorId, TensorId)> {
        let k = points.len();
        let mut feat_data = Vec::with_capacity(k * self.cfg.feature_dim);
        let mut coords = Vec::with_capacity(k);
        for p in points {
            feat_data.extend(interpolate_point_feature(pyramid, p.x, p.y)?);
            coords.push((p.x, p.y));
        }
        let raw = tape.value(vec![k, self.cfg.feature_dim], feat_data)?;
        let w = frame.inject(&self.store, tape, self.input_proj.w)?;
        let b = frame.inject(&self.store, tape, self.input_proj.b)?;
        let point_feats = linear(tape, raw, w, Some(b))?;
        if k > self.general_bank.n {
            return Err(Error::Precondition(format!(
                "{k} denoising points exceed the bank size {}",
                self.general_bank.n
            )));
        }
        let bank = self.general_bank.inject(frame, &self.store, tape)?;
        let slots = tape.slice_rows(bank, 0, k)?;
        let content = if self.cfg.add_point_feature {
            tape.add(slots, point_feats)?
        } else {
            slots
        };
        let delta = self.initial_box_delta(tape, frame, point_feats)?;
        let anchors = tape.value(vec![k, 4], anchor_logits(&coords))?;
        let box_logits = tape.add(anchors, delta)?;
        Ok((content, box_logits))
    }
}

/// One training step's loss graph for a single image.
pub struct BuiltLoss {
    pub loss: TensorId,
    pub report: LossReport,
}

impl OpenWorldModel {
    /// Compose the training loss for one image on the given tape.
    ///
    /// Pretrain: encoder-side grounding over the promoted cells plus the
    /// decoder's specific path, averaged over layers. Adaptation: specific
    /// path plus either denoising points (groups leak-masked) or Hungarian-
    /// matched prompt queries, depending on the toggles.
    pub fn build_loss(
        &self,
        tape: &mut Tape,
        frame: &mut Frame,
        scene: &Scene,
        pyramid: &FeaturePyramid,
        table: &CategoryTable,
        prompts: &[PromptPoint],
        stage: Stage,
        step_seed: u64,
    ) -> Result<BuiltLoss> {
        let vocab: Vec<Vec<f64>> = (0..table.len())
            .map(|id| table.embedding(id).map(<[f64]>::to_vec))
            .collect::<Result<_>>()?;
        let n_cat = vocab.len();
        let ctx = self.image_context(tape, frame, pyramid, &vocab)?;
        let (spec_content, spec_boxes, chosen) = self.specific_queries(tape, frame, &ctx)?;
        let n_specific = chosen.len();

        // Assemble the fused query set by stage.
        let use_dn = stage == Stage::Adapt
            && self.cfg.toggles.general
            && self.cfg.toggles.denoising
            && !scene.boxes.is_empty();
        let use_prompts = stage == Stage::Adapt
            && self.cfg.toggles.general
            && !self.cfg.toggles.denoising
            && !prompts.is_empty();

        let mut dn_points: Vec<NoisePoint> = Vec::new();
        let mut group_sizes: Vec<usize> = Vec::new();
        let mut parts: Vec<TensorId> = Vec::new();
        let mut box_parts: Vec<TensorId> = Vec::new();
        if use_dn {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                self.cfg.seed ^ step_seed,
                scene.image_id,
            ));
            let groups = sample_groups(&scene.boxes, &self.cfg.dn, &mut rng)?;
            for g in &groups {
                group_sizes.push(g.len());
            }
            dn_points = groups.into_iter().flatten().collect();
            let (c, b) = self.denoising_queries(tape, frame, pyramid, &dn_points)?;
            parts.push(c);
            box_parts.push(b);
        }
        let mut n_general = 0usize;
        if use_prompts {
            let (c, b, order) = self.general_queries(tape, frame, pyramid, prompts)?;
            n_general = order.len();
            parts.push(c);
            box_parts.push(b);
        }
        parts.push(spec_content);
        box_parts.push(spec_boxes);

        let partition = Partition {
            n_dn: dn_points.len(),
            n_general,
            n_specific,
        };
        let content = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let box_logits = if box_parts.len() == 1 {
            box_parts[0]
        } else {
            tape.concat_rows(&box_parts)?
        };
        let mask = denoising_attention_mask(&group_sizes, n_general, n_specific);

        let traces = decode(
            tape,
            frame,
            &self.store,
            &self.stack,
            &DecodeInputs {
                content,
                box_logits,
                text_feats: ctx.text_feats,
                image_feats: ctx.image_feats,
                image_pos: ctx.image_pos,
                self_mask: if dn_points.is_empty() { None } else { Some(&mask) },
                partition,
            },
        )?;

        // Per-layer losses on each partition, averaged over the charged
        // layers (all of them, or just the last when aux losses are off).
        let charged = if self.cfg.aux_loss {
            &traces[..]
        } else {
            &traces[traces.len() - 1..]
        };
        let mut report = LossReport::zero();
        report.n_denoising_points = dn_points.len();
        let layer_scale = 1.0 / charged.len().max(1) as f64;
        let mut specific_losses: Vec<TensorId> = Vec::new();
        let mut general_losses: Vec<TensorId> = Vec::new();
        let mut dn_losses: Vec<TensorId> = Vec::new();
        for tr in charged {
            let boxes = tape.sigmoid(tr.box_logits);
            let k_dn = partition.n_dn;
            let k_gen = partition.n_general;

            let spec_rows_c = tape.slice_rows(tr.content, k_dn + k_gen, n_specific)?;
            let spec_rows_b = tape.slice_rows(boxes, k_dn + k_gen, n_specific)?;
            let spec_logits = self.alignment_logits(tape, frame, spec_rows_c, ctx.text_feats)?;
            let out = grounding_loss(
                tape,
                spec_rows_b,
                spec_logits,
                &scene.boxes,
                &scene.labels,
                n_cat,
                &self.cfg.loss,
            )?;
            report.grounding_class += out.class_term * layer_scale;
            report.grounding_l1 += out.l1_term * layer_scale;
            report.grounding_giou += out.giou_term * layer_scale;
            report.n_matched = out.matches.len();
            specific_losses.push(out.loss);

            if k_gen > 0 {
                let gen_rows_c = tape.slice_rows(tr.content, k_dn, k_gen)?;
                let gen_rows_b = tape.slice_rows(boxes, k_dn, k_gen)?;
                let gen_logits = self.alignment_logits(tape, frame, gen_rows_c, ctx.text_feats)?;
                let out = grounding_loss(
                    tape,
                    gen_rows_b,
                    gen_logits,
                    &scene.boxes,
                    &scene.labels,
                    n_cat,
                    &self.cfg.loss,
                )?;
                general_losses.push(out.loss);
            }
            if k_dn > 0 {
                let dn_rows_c = tape.slice_rows(tr.content, 0, k_dn)?;
                let dn_rows_b = tape.slice_rows(boxes, 0, k_dn)?;
                let dn_logits = self.alignment_logits(tape, frame, dn_rows_c, ctx.text_feats)?;
                let out: MatchedLoss = denoising_loss(
                    tape,
                    dn_rows_b,
                    dn_logits,
                    &dn_points,
                    &scene.boxes,
                    &scene.labels,
                    n_cat,
                    &self.cfg.loss,
                )?;
                report.denoising_class += out.class_term * layer_scale;
                report.denoising_l1 += out.l1_term * layer_scale;
                report.denoising_giou += out.giou_term * layer_scale;
                dn_losses.push(out.loss);
            }
        }

        let mean_of = |tape: &mut Tape, ids: &[TensorId]| -> Result<Option<TensorId>> {
            if ids.is_empty() {
                return Ok(None);
            }
            let mut acc = ids[0];
            for &id in &ids[1..] {
                acc = tape.add(acc, id)?;
            }
            Ok(Some(tape.scale(acc, 1.0 / ids.len() as f64)))
        };

        let specific = mean_of(tape, &specific_losses)?.expect("specific path always present");
        let mut total = specific;

        if stage == Stage::Pretrain {
            // Encoder-side grounding over the promoted cells trains the
            // scorer and the shared initial head directly: the proposals'
            // own logits and pre-decoder boxes are charged against the scene.
            let cell_feats = tape.gather_rows(ctx.image_feats, &chosen)?;
            let cell_logits = self.alignment_logits(tape, frame, cell_feats, ctx.text_feats)?;
            let proposal_boxes = tape.sigmoid(spec_boxes);
            let out = grounding_loss(
                tape,
                proposal_boxes,
                cell_logits,
                &scene.boxes,
                &scene.labels,
                n_cat,
                &self.cfg.loss,
            )?;
            total = tape.add(total, out.loss)?;
        }

        if let Some(g) = mean_of(tape, &general_losses)? {
            // Matched prompts: average the two grounding paths.
            let summed = tape.add(total, g)?;
            total = tape.scale(summed, 0.5);
        }
        if let Some(dnl) = mean_of(tape, &dn_losses)? {
            let weighted = tape.scale(dnl, self.cfg.dn_weight);
            total = tape.add(total, weighted)?;
        }

        report.total = tape.data(total)[0];
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss {}",
                report.total
            )));
        }
        Ok(BuiltLoss { loss: total, report })
    }

    /// Run detection against a vocabulary. Prompt points drive the general
    /// path (ignored when the path is toggled off or empty); the specific
    /// path scores the grid against the same vocabulary. Labels index the
    /// vocabulary. Results are score-sorted, thresholded, duplicate-
    /// suppressed per class, and capped.
    pub fn detect(
        &self,
        pyramid: &FeaturePyramid,
        vocab: &[Vec<f64>],
        prompts: &[PromptPoint],
        dcfg: &DetectConfig,
    ) -> Result<Vec<Detection>> {
        self.detect_within(pyramid, vocab, vocab.len(), prompts, dcfg)
    }

    /// Like `detect`, but specific queries classify only against the first
    /// `spec_limit` vocabulary entries while point queries use the whole
    /// vocabulary. Both attend over the full vocabulary's text features;
    /// only the classification argmax is restricted. This is how a
    /// predefined category list coexists with discovered labels: the list
    /// occupies the vocabulary prefix, discoveries are appended.
    pub fn detect_within(
        &self,
        pyramid: &FeaturePyramid,
        vocab: &[Vec<f64>],
        spec_limit: usize,
        prompts: &[PromptPoint],
        dcfg: &DetectConfig,
    ) -> Result<Vec<Detection>> {
        if spec_limit == 0 || spec_limit > vocab.len() {
            return Err(Error::Precondition(format!(
                "spec_limit {spec_limit} outside 1..={}",
                vocab.len()
            )));
        }
        let mut tape = Tape::new();
        let mut frame = Frame::new();
        let ctx = self.image_context(&mut tape, &mut frame, pyramid, vocab)?;
        let (spec_content, spec_boxes, chosen) = self.specific_queries(&mut tape, &mut frame, &ctx)?;
        let n_specific = chosen.len();

        let use_general = self.cfg.toggles.general && !prompts.is_empty();
        let (content, box_logits, n_general) = if use_general {
            let (gc, gb, order) =
                self.general_queries(&mut tape, &mut frame, pyramid, prompts)?;
            let c = tape.concat_rows(&[gc, spec_content])?;
            let b = tape.concat_rows(&[gb, spec_boxes])?;
            (c, b, order.len())
        } else {
            (spec_content, spec_boxes, 0)
        };

        let partition = Partition { n_dn: 0, n_general, n_specific };
        let traces = decode(
            &mut tape,
            &mut frame,
            &self.store,
            &self.stack,
            &DecodeInputs {
                content,
                box_logits,
                text_feats: ctx.text_feats,
                image_feats: ctx.image_feats,
                image_pos: ctx.image_pos,
                self_mask: None,
                partition,
            },
        )?;
        let last: &LayerTrace = traces.last().ok_or_else(|| {
            Error::Config("detection needs a decoder with at least one layer".into())
        })?;

        let boxes_id = tape.sigmoid(last.box_logits);
        let logits_id = self.alignment_logits(&mut tape, &mut frame, last.content, ctx.text_feats)?;
        let boxes = tape.data(boxes_id).to_vec();
        let logits = tape.data(logits_id).to_vec();
        let n_cat = vocab.len();
        let q = partition.total();

        let mut detections = Vec::with_capacity(q);
        for i in 0..q {
            let general = i < n_general;
            let allowed = if general { n_cat } else { spec_limit };
            let row = &logits[i * n_cat..i * n_cat + allowed];
            let mut best_c = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best_c] {
                    best_c = c;
                }
            }
            let score = crate::geometry::sigmoid(row[best_c]);
            if score < dcfg.score_threshold {
                continue;
            }
            let b = &boxes[i * 4..(i + 1) * 4];
            detections.push(Detection {
                box_: Box::new(b[0], b[1], b[2], b[3]),
                score,
                label: best_c,
                source: if general {
                    QuerySource::General
                } else {
                    QuerySource::Specific
                },
            });
        }
        detections.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
        // The general and specific families routinely land on the same
        // object; keep only the higher-scoring box per class above nms_iou.
        let mut kept: Vec<Detection> = Vec::new();
        for d in detections {
            if kept.len() == dcfg.max_detections {
                break;
            }
            let duplicate = kept.iter().any(|k| {
                k.label == d.label && crate::geometry::iou(&k.box_, &d.box_) > dcfg.nms_iou
            });
            if !duplicate {
                kept.push(d);
            }
        }
        Ok(kept)
    }
}

// ---- checkpointing ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema: u32,
    cfg: ModelConfig,
    params: Vec<CheckpointParam>,
}

impl OpenWorldModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut params = Vec::new();
        for name in self.store.names() {
            let id = self.store.id_of(name).expect("listed name resolves");
            let e = self.store.entry(id);
            params.push(CheckpointParam {
                name: name.to_string(),
                shape: e.shape.clone(),
                data: e.data.clone(),
                trainable: e.trainable,
            });
        }
        let ck = Checkpoint { schema: 1, cfg: self.cfg.clone(), params };
        let json = serde_json::to_string(&ck)
            .map_err(|e| Error::json("serializing checkpoint", e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::json("parsing checkpoint", e))?;
        if ck.schema != 1 {
            return Err(Error::Consistency(format!(
                "unsupported checkpoint schema {}",
                ck.schema
            )));
        }
        let mut model = OpenWorldModel::new(ck.cfg)?;
        let mut seen = BTreeSet::new();
        for p in ck.params {
            let id = model.store.id_of(&p.name).ok_or_else(|| {
                Error::Consistency(format!("checkpoint has unknown parameter {}", p.name))
            })?;
            if model.store.entry(id).shape != p.shape {
                return Err(Error::Consistency(format!(
                    "checkpoint parameter {} has shape {:?}, model expects {:?}",
                    p.name,
                    p.shape,
                    model.store.entry(id).shape
                )));
            }
            model.store.set_data(id, p.data)?;
            model.store.set_trainable(id, p.trainable);
            seen.insert(p.name);
        }
        let expected: BTreeSet<String> = model.store.names().map(str::to_string).collect();
        if seen != expected {
            let missing: Vec<_> = expected.difference(&seen).cloned().collect();
            return Err(Error::Consistency(format!(
                "checkpoint is missing parameters: {missing:?}"
            )));
        }
        Ok(model)
    }
}
