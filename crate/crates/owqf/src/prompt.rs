//! Synthetic stand-in for a vision-language model's attention maps.
//!
//! Real point prompts come from aggregating a VLM's attention heads and
//! multiplying maps across layers so persistent peaks survive and transient
//! ones wash out. This module reproduces that pipeline on synthetic stacks
//! whose ground truth is known: a fidelity knob controls how reliably true
//! object centers appear as peaks, a label-noise knob emulates hallucinated
//! category names, and distractor peaks appear at rate `1 - fidelity`.
//!
//! The sampler emits positive prompt points only; negative evidence stays
//! internal to the map pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::world::{CategoryTable, Scene};

#[derive(Debug, Clone)]
pub struct PromptConfig {
    /// Probability that a true object contributes peaks to the stack.
    pub fidelity: f64,
    /// Probability that a point inside an object reports a wrong label.
    pub label_noise: f64,
    /// Minimum refined-map value for a cell to become a prompt point.
    pub threshold: f64,
    pub max_points: usize,
    pub layers: usize,
    pub heads: usize,
    /// Attention maps are `map_size x map_size`.
    pub map_size: usize,
    /// Suppression radius between accepted points, in cells.
    pub nms_radius: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            fidelity: 0.9,
            label_noise: 0.1,
            threshold: 0.3,
            max_points: 20,
            layers: 3,
            heads: 4,
            map_size: 24,
            nms_radius: 2.0,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fidelity) {
            return Err(Error::Config(format!(
                "prompt.fidelity must be in [0, 1], got {}",
                self.fidelity
            )));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!(
                "prompt.label_noise must be in [0, 1], got {}",
                self.label_noise
            )));
        }
        if self.layers == 0 || self.heads == 0 || self.map_size < 4 {
            return Err(Error::Config(
                "prompt simulator needs layers >= 1, heads >= 1, map_size >= 4".into(),
            ));
        }
        Ok(())
    }
}

/// Nonnegative attention maps, `[layers][heads][h][w]` flattened.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    pub layers: usize,
    pub heads: usize,
    pub h: usize,
    pub w: usize,
    pub maps: Vec<f64>,
}

impl AttentionStack {
    pub fn map(&self, layer: usize, head: usize) -> &[f64] {
        let cells = self.h * self.w;
        let base = (layer * self.heads + head) * cells;
        &self.maps[base..base + cells]
    }

    fn map_mut(&mut self, layer: usize, head: usize) -> &mut [f64] {
        let cells = self.h * self.w;
        let base = (layer * self.heads + head) * cells;
        &mut self.maps[base..base + cells]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptPoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
    pub proposed_label: usize,
}

fn add_bump(map: &mut [f64], h: usize, w: usize, fx: f64, fy: f64, amp: f64, sigma: f64) {
    let r = 3.0 * sigma;
    let i_lo = ((fy - r).floor().max(0.0)) as usize;
    let i_hi = ((fy + r).ceil().min((h - 1) as f64)) as usize;
    let j_lo = ((fx - r).floor().max(0.0)) as usize;
    let j_hi = ((fx + r).ceil().min((w - 1) as f64)) as usize;
    for i in i_lo..=i_hi {
        for j in j_lo..=j_hi {
            let dy = (i as f64 - fy) / sigma;
            let dx = (j as f64 - fx) / sigma;
            map[i * w + j] += amp * (-0.5 * (dx * dx + dy * dy)).exp();
        }
    }
}

/// Build a synthetic attention stack for a scene.
///
/// Each object is "attended" with probability `fidelity`; an attended object
/// places a peak at its center in every layer, in a random nonempty subset
/// of heads, with amplitude drawn once per layer from [0.85, 1.0]. For each
/// object, with probability `1 - fidelity` a distractor peak appears at a
/// random location, consistently across layers so it can survive the flow
/// (a hallucinated object). Maps carry a small positive background.
pub fn synthesize_attention(
    scene: &Scene,
    cfg: &PromptConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AttentionStack> {
    cfg.validate()?;
    let (h, w) = (cfg.map_size, cfg.map_size);
    let cells = h * w;
    let mut stack = AttentionStack {
        layers: cfg.layers,
        heads: cfg.heads,
        h,
        w,
        maps: (0..cfg.layers * cfg.heads * cells)
            .map(|_| 0.0)
            .collect(),
    };
    for l in 0..cfg.layers {
        for hd in 0..cfg.heads {
            let m = stack.map_mut(l, hd);
            for v in m.iter_mut() {
                *v = rng.random_range(0.01..0.05);
            }
        }
    }

    // One nonempty head subset per layer, shared by every peak in that
    // layer. Sharing keeps between-peak amplitude ratios intact through the
    // peak-weighted head aggregation, so the multiplicative flow cannot
    // starve an object that drew an unlucky subset.
    let mut subsets: Vec<Vec<bool>> = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let mut chosen = vec![false; cfg.heads];
        let mut any = false;
        for c in chosen.iter_mut() {
            *c = rng.random_range(0.0..1.0) < 0.6;
            any |= *c;
        }
        if !any {
            chosen[rng.random_range(0..cfg.heads)] = true;
        }
        subsets.push(chosen);
    }

    let sigma = 1.2;
    let place = |stack: &mut AttentionStack, fx: f64, fy: f64, lo_amp: f64, rng: &mut ChaCha8Rng| {
        for (l, chosen) in subsets.iter().enumerate() {
            let amp = rng.random_range(lo_amp..1.0);
            for (hd, &c) in chosen.iter().enumerate() {
                if c {
                    add_bump(stack.map_mut(l, hd), h, w, fx, fy, amp, sigma);
                }
            }
        }
    };

    for b in &scene.boxes {
        let attended = rng.random_range(0.0..1.0) < cfg.fidelity;
        let fx = b.cx * w as f64 - 0.5;
        let fy = b.cy * h as f64 - 0.5;
        if attended {
            place(&mut stack, fx, fy, 0.85, rng);
        }
        if rng.random_range(0.0..1.0) < 1.0 - cfg.fidelity {
            let dx = rng.random_range(0.0..w as f64 - 1.0);
            let dy = rng.random_range(0.0..h as f64 - 1.0);
            place(&mut stack, dx, dy, 0.70, rng);
        }
    }
    Ok(stack)
}

/// Collapse heads per layer with weights proportional to each head's
/// peak-to-mean ratio, normalized within the layer. Sharply peaked heads
/// dominate diffuse ones.
pub fn aggregate_heads(stack: &AttentionStack) -> Result<Vec<Vec<f64>>> {
    let cells = stack.h * stack.w;
    if stack.maps.iter().any(|&v| v < 0.0) {
        return Err(Error::Precondition("attention maps must be nonnegative".into()));
    }
    let mut out = Vec::with_capacity(stack.layers);
    for l in 0..stack.layers {
        let mut ratios = Vec::with_capacity(stack.heads);
        for hd in 0..stack.heads {
            let m = stack.map(l, hd);
            let peak = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean = m.iter().sum::<f64>() / cells as f64;
            ratios.push(peak / mean.max(1e-12));
        }
        let total: f64 = ratios.iter().sum();
        let mut agg = vec![0.0; cells];
        for (hd, r) in ratios.iter().enumerate() {
            let wgt = r / total.max(1e-12);
            for (a, v) in agg.iter_mut().zip(stack.map(l, hd)) {
                *a += wgt * v;
            }
        }
        out.push(agg);
    }
    Ok(out)
}

/// Multiply aggregated maps across layers, renormalizing to max 1 at each
/// step, so only peaks persisting through every layer survive. The output is
/// max-normalized; a single layer passes through (normalized).
pub fn attention_flow(per_layer: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_layer
        .first()
        .ok_or_else(|| Error::Precondition("attention_flow needs at least one layer".into()))?;
    let normalize = |m: &mut Vec<f64>| {
        let mx = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if mx > 0.0 {
            m.iter_mut().for_each(|v| *v /= mx);
        }
    };
    let mut refined = first.clone();
    for next in &per_layer[1..] {
        if next.len() != refined.len() {
            return Err(Error::Precondition(format!(
                "attention_flow layers disagree in size: {} vs {}",
                refined.len(),
                next.len()
            )));
        }
        for (r, n) in refined.iter_mut().zip(next) {
            *r = *r * n + 1e-8;
        }
        normalize(&mut refined);
    }
    normalize(&mut refined);
    Ok(refined)
}

/// Extract prompt points from a refined map: strict local maxima above
/// `threshold`, greedily kept in score order with suppression inside
/// `nms_radius` cells, localized by the 3x3 weighted centroid, truncated to
/// `max_points`. Scores are the refined-map values, so the output is sorted
/// descending.
pub fn sample_prompt_points(
    refined: &[f64],
    h: usize,
    w: usize,
    cfg: &PromptConfig,
) -> Result<Vec<(f64, f64, f64)>> {
    if refined.len() != h * w {
        return Err(Error::Precondition(format!(
            "refined map length {} does not cover {h} x {w}",
            refined.len()
        )));
    }
    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let v = refined[i * w + j];
            if v <= cfg.threshold {
                continue;
            }
            let mut is_max = true;
            'nbrs: for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                        continue;
                    }
                    if refined[ni as usize * w + nj as usize] >= v {
                        is_max = false;
                        break 'nbrs;
                    }
                }
            }
            if is_max {
                candidates.push((i, j, v));
            }
        }
    }
    candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal));

    let mut kept: Vec<(usize, usize, f64)> = Vec::new();
    for  (i, j, v) in candidates {
        let far_enough = kept.iter().all(|&(ki, kj, _)| {
            let dy = ki as f64 - i as f64;
            let dx = kj as f64 - j as f64;
            (dx * dx + dy * dy).sqrt() > cfg.nms_radius
        });
        if far_enough {
            kept.push((i, j, v));
            if kept.len() >= cfg.max_points {
                break;
            }
        }
    }

    let mut points = Vec::with_capacity(kept.len());
    for (i, j, v) in kept {
        let mut sw = 0.0;
        let mut sx = 0.0;
        let mut sy = 0.0;
        for di in -1i64..=1 {
            for dj in -1i64..=1 {
                let (ni, nj) = (i as i64 + di, j as i64 + dj);
                if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                    continue;
                }
                let wv = refined[ni as usize * w + nj as usize].max(0.0);
                sw += wv;
                sx += wv * (nj as f64 + 0.5);
                sy += wv * (ni as f64 + 0.5);
            }
        }
        let (px, py) = if sw > 0.0 {
            (sx / sw / w as f64, sy / sw / h as f64)
        } else {
            ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64)
        };
        points.push((px.clamp(0.0, 1.0), py.clamp(0.0, 1.0), v));
    }
    Ok(points)
}

/// Full pipeline: synthesize a stack for the scene, aggregate, flow, sample,
/// and attach proposed labels. A point inside a ground-truth box reports
/// that box's label with probability `1 - label_noise` (otherwise a random
/// other category); a point outside every box reports a random category.
pub fn simulate_prompts(
    scene: &Scene,
    table: &CategoryTable,
    cfg: &PromptConfig,
    seed: u64,
) -> Result<Vec<PromptPoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(scene.image_id),
    );
    let stack = synthesize_attention(scene, cfg, &mut rng)?;
    let per_layer = aggregate_heads(&stack)?;
    let refined = attention_flow(&per_layer)?;
    let raw = sample_prompt_points(&refined, stack.h, stack.w, cfg)?;
    if table.is_empty() {
        return Err(Error::Config("prompt simulation needs a nonempty category table".into()));
    }

    let mut points = Vec::with_capacity(raw.len());
    for (x, y, score) in raw {
        // Smallest box containing the point wins (most specific object).
        let mut owner: Option<usize> = None;
        for (bi, b) in scene.boxes.iter().enumerate() {
            if b.contains(x, y)
                && owner.map_or(true, |o: usize| b.area() < scene.boxes[o].area())
            {
                owner = Some(bi);
            }
        }
        let proposed_label = match owner {
            Some(bi) => {
                let truth = scene.labels[bi];
                if rng.random_range(0.0..1.0) < cfg.label_noise && table.len() > 1 {
                    // A wrong label, uniformly among the others.
                    let mut l = rng.random_range(0..table.len() - 1);
                    if l >= truth {
                        l += 1;
                    }
                    l
                } else {
                    truth
                }
            }
            None => rng.random_range(0..table.len()),
        };
        points.push(PromptPoint {
            x,
            y,
            score,
            proposed_label,
        });
    }
    Ok(points)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct PromptFilePoint {
    x: f64,
    y: f64,
    score: f64,
    label: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct PromptFileEntry {
    image_id: u64,
    points: Vec<PromptFilePoint>,
}

/// Load user-supplied prompt points: a JSON array of
/// `{image_id, points: [{x, y, score, label}]}` objects.
pub fn load_prompt_file(
    path: &std::path::Path,
) -> Result<std::collections::BTreeMap<u64, Vec<PromptPoint>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let entries: Vec<PromptFileEntry> =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let mut out = std::collections::BTreeMap::new();
    for entry in entries {
        let mut points = Vec::with_capacity(entry.points.len());
        for p in entry.points {
            if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) {
                return Err(Error::Precondition(format!(
                    "prompt point ({}, {}) for image {} outside the unit square",
                    p.x, p.y, entry.image_id
                )));
            }
            if !p.score.is_finite() {
                return Err(Error::Precondition(format!(
                    "non-finite prompt score for image {}",
                    entry.image_id
                )));
            }
            points.push(PromptPoint {
                x: p.x,
                y: p.y,
                score: p.score,
                proposed_label: p.label,
            });
        }
        if out.insert(entry.image_id, points).is_some() {
            return Err(Error::Consistency(format!(
                "duplicate image id {} in prompt file",
                entry.image_id
            )));
        }
    }
    Ok(out)
}

/// Counterpart of [`load_prompt_file`], used to seed editable prompt files.
pub fn save_prompt_file(
    path: &std::path::Path,
    prompts: &std::collections::BTreeMap<u64, Vec<PromptPoint>>,
) -> Result<()> {
    let entries: Vec<PromptFileEntry> = prompts
        .iter()
        .map(|(&image_id, pts)| PromptFileEntry {
            image_id,
            points: pts
                .iter()
                .map(|p| PromptFilePoint {
                    x: p.x,
                    y: p.y,
                    score: p.score,
                    label: p.proposed_label,
                })
                .collect(),
        })
        .collect();
    let text =
        serde_json::to_string_pretty(&entries).map_err(|e| Error::json("prompt file", e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box;
    use crate::world::{generate_scene, CategoryTable, SceneGenConfig};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn one_object_scene(cx: f64, cy: f64, id: u64) -> Scene {
        Scene {
            image_id: id,
            seed: id * 31 + 7,
            boxes: vec![Box::new(cx, cy, 0.2, 0.2)],
            labels: vec![0],
        }
    }

    #[test]
    fn perfect_fidelity_argmax_inside_single_object() {
        let cfg = PromptConfig { fidelity: 1.0, ..Default::default() };
        for id in 0..50 {
            let cx = 0.15 + 0.013 * id as f64;
            let cy = 0.8 - 0.011 * id as f64;
            let scene = one_object_scene(cx, cy, id);
            let stack = synthesize_attention(&scene, &cfg, &mut rng(id)).unwrap();
            let per_layer = aggregate_heads(&stack).unwrap();
            let refined = attention_flow(&per_layer).unwrap();
            let argmax = refined
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let (i, j) = (argmax / stack.w, argmax % stack.w);
            let x = (j as f64 + 0.5) / stack.w as f64;
            let y = (i as f64 + 0.5) / stack.h as f64;
            assert!(
                scene.boxes[0].contains(x, y),
                "argmax ({x:.3}, {y:.3}) outside box centered ({cx:.3}, {cy:.3})"
            );
        }
    }

    #[test]
    fn zero_fidelity_peaks_independent_of_objects() {
        // At fidelity 0 no true peak is placed, so the argmax should land in
        // the object's box no more often than in a mirrored control box of
        // the same size. Paired two-proportion z-test.
        let cfg = PromptConfig { fidelity: 0.0, ..Default::default() };
        let obj = Box::new(0.3, 0.3, 0.3, 0.3);
        let ctrl = Box::new(0.7, 0.7, 0.3, 0.3);
        let n = 400;
        let (mut hits_obj, mut hits_ctrl) = (0f64, 0f64);
        for id in 0..n {
            let scene = Scene {
                image_id: id,
                seed: 1000 + id,
                boxes: vec![obj],
                labels: vec![0],
            };
            let stack = synthesize_attention(&scene, &cfg, &mut rng(id)).unwrap();
            let per_layer = aggregate_heads(&stack).unwrap();
            let refined = attention_flow(&per_layer).unwrap();
            let argmax = refined
                .iter()
                .enumerate()
                .max_by(|a, bb| a.1.partial_cmp(bb.1).unwrap())
                .unwrap()
                .0;
            let (i, j) = (argmax / stack.w, argmax % stack.w);
            let x = (j as f64 + 0.5) / stack.w as f64;
            let y = (i as f64 + 0.5) / stack.h as f64;
            if obj.contains(x, y) {
                hits_obj += 1.0;
            }
            if ctrl.contains(x, y) {
                hits_ctrl += 1.0;
            }
        }
        let pooled = (hits_obj + hits_ctrl) / (2.0 * n as f64);
        let se = (pooled * (1.0 - pooled) * 2.0 / n as f64).sqrt().max(1e-9);
        let z = (hits_obj - hits_ctrl) / (n as f64) / se;
        assert!(z.abs() < 2.5, "containment rate correlates with objects: z = {z:.2}");
    }

    #[test]
    fn aggregate_single_head_is_identity() {
        let scene = one_object_scene(0.5, 0.5, 3);
        let cfg = PromptConfig { heads: 1, ..Default::default() };
        let stack = synthesize_attention(&scene, &cfg, &mut rng(3)).unwrap();
        let agg = aggregate_heads(&stack).unwrap();
        for l in 0..stack.layers {
            for (a, m) in agg[l].iter().zip(stack.map(l, 0)) {
                assert!((a - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_identical_heads_equals_any_head() {
        let cells = 36;
        let base: Vec<f64> = (0..cells).map(|i| 0.1 + (i % 7) as f64 * 0.3).collect();
        let mut maps = Vec::new();
        for _ in 0..3 {
            maps.extend_from_slice(&base);
        }
        let stack = AttentionStack { layers: 1, heads: 3, h: 6, w: 6, maps };
        let agg = aggregate_heads(&stack).unwrap();
        for (a, b) in agg[0].iter().zip(&base) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_sharp_head_dominates() {
        let (h, w) = (8, 8);
        let cells = h * w;
        // Head 0: uniform. Head 1: single sharp peak at (2, 5).
        let mut maps = vec![0.5; cells];
        let mut sharp = vec![0.05; cells];
        sharp[2 * w + 5] = 3.0;
        maps.extend_from_slice(&sharp);
        let stack = AttentionStack { layers: 1, heads: 2, h, w, maps };
        let agg = aggregate_heads(&stack).unwrap();
        let argmax = agg[0]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 2 * w + 5);
        // And the sharp head's weight is the larger one: the aggregated peak
        // value should be much closer to the sharp peak than the uniform mix.
        assert!(agg[0][2 * w + 5] > 1.5);
    }

    #[test]
    fn flow_single_layer_passes_through_normalized() {
        let layer = vec![0.2, 0.4, 0.8, 0.4];
        let refined = attention_flow(&[layer.clone()]).unwrap();
        for (r, l) in refined.iter().zip(&layer) {
            assert!((r - l / 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn flow_uniform_stack_stays_uniform() {
        let layers: Vec<Vec<f64>> = (0..4).map(|_| vec![0.3; 25]).collect();
        let refined = attention_flow(&layers).unwrap();
        let first = refined[0];
        assert!(refined.iter().all(|&v| (v - first).abs() < 1e-12));
        assert!((first - 1.0).abs() < 1e-12, "max-normalized uniform map is all ones");
    }

    #[test]
    fn flow_common_peak_wins() {
        // A peak at cell 7 in every layer; transient peaks move around.
        let cells = 16;
        let mut layers = Vec::new();
        for l in 0..4usize {
            let mut m = vec![0.05; cells];
            m[7] = 0.9;
            m[(l * 3 + 1) % cells] = 1.0; // transient, different cell each layer
            layers.push(m);
        }
        let refined = attention_flow(&layers).unwrap();
        let argmax = refined
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 7);
    }

    #[test]
    fn sample_zero_map_is_empty() {
        let cfg = PromptConfig::default();
        let pts = sample_prompt_points(&vec![0.0; 64], 8, 8, &cfg).unwrap();
        assert!(pts.is_empty());
    }

    #[test]
    fn sample_orders_and_truncates() {
        let (h, w) = (12, 12);
        let mut m = vec![0.0; h * w];
        m[2 * w + 2] = 0.8;
        m[9 * w + 9] = 1.0;
        m[2 * w + 9] = 0.5;
        let mut cfg = PromptConfig::default();
        let pts = sample_prompt_points(&m, h, w, &cfg).unwrap();
        assert_eq!(pts.len(), 3);
        assert!(pts[0].2 >= pts[1].2 && pts[1].2 >= pts[2].2);
        assert!((pts[0].0 - (9.5 / 12.0)).abs() < 0.05);
        cfg.max_points = 2;
        let pts2 = sample_prompt_points(&m, h, w, &cfg).unwrap();
        assert_eq!(pts2.len(), 2);
        assert!((pts2[1].2 - 0.8).abs() < 1e-12, "kept the two strongest");
    }

    #[test]
    fn sample_nms_suppresses_neighbors() {
        let (h, w) = (10, 10);
        let mut m = vec![0.0; h * w];
        m[4 * w + 4] = 1.0;
        m[4 * w + 6] = 0.9; // within radius 2 of the first
        let cfg = PromptConfig::default();
        let pts = sample_prompt_points(&m, h, w, &cfg).unwrap();
        assert_eq!(pts.len(), 1);
        assert!((pts[0].2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recall_at_perfect_fidelity() {
        let table = CategoryTable::build(1, 16, 2, 3, 3);
        let gen = SceneGenConfig { min_objects: 2, max_objects: 5, ..Default::default() };
        let cfg = PromptConfig { fidelity: 1.0, label_noise: 0.0, ..Default::default() };
        let mut covered = 0usize;
        let mut total = 0usize;
        for s in 0..200 {
            let scene = generate_scene(&table, &gen, s, 5000 + 13 * s).unwrap();
            let pts = simulate_prompts(&scene, &table, &cfg, 9).unwrap();
            for b in &scene.boxes {
                total += 1;
                if pts.iter().any(|p| b.contains(p.x, p.y)) {
                    covered += 1;
                }
            }
        }
        let recall = covered as f64 / total as f64;
        assert!(recall >= 0.9, "recall {recall:.3} over {total} objects");
    }

    #[test]
    fn prompts_are_deterministic() {
        let table = CategoryTable::build(1, 16, 2, 3, 3);
        let gen = SceneGenConfig { min_objects: 3, max_objects: 3, ..Default::default() };
        let scene = generate_scene(&table, &gen, 0, 77).unwrap();
        let cfg = PromptConfig::default();
        let a = simulate_prompts(&scene, &table, &cfg, 4).unwrap();
        let b = simulate_prompts(&scene, &table, &cfg, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn label_noise_rate_matches_config() {
        let table = CategoryTable::build(1, 16, 2, 3, 3);
        let gen = SceneGenConfig { min_objects: 3, max_objects: 5, ..Default::default() };
        let cfg = PromptConfig { fidelity: 1.0, label_noise: 0.25, ..Default::default() };
        let mut wrong = 0usize;
        let mut inside = 0usize;
        for s in 0..300 {
            let scene = generate_scene(&table, &gen, s, 31 * s + 11).unwrap();
            let pts = simulate_prompts(&scene, &table, &cfg, 1).unwrap();
            for p in pts {
                // Same owner rule as the simulator: smallest containing box.
                let mut owner: Option<usize> = None;
                for (bi, b) in scene.boxes.iter().enumerate() {
                    if b.contains(p.x, p.y)
                        && owner.map_or(true, |o: usize| b.area() < scene.boxes[o].area())
                    {
                        owner = Some(bi);
                    }
                }
                if let Some(bi) = owner {
                    inside += 1;
                    if p.proposed_label != scene.labels[bi] {
                        wrong += 1;
                    }
                }
            }
        }
        let rate = wrong as f64 / inside as f64;
        assert!(
            (rate - 0.25).abs() < 0.05,
            "label noise rate {rate:.3} over {inside} in-box points"
        );
    }

    #[test]
    fn zero_noise_labels_are_exact() {
        let table = CategoryTable::build(1, 16, 2, 3, 3);
        let gen = SceneGenConfig { min_objects: 2, max_objects: 4, ..Default::default() };
        let cfg = PromptConfig { fidelity: 1.0, label_noise: 0.0, ..Default::default() };
        for s in 0..50 {
            let scene = generate_scene(&table, &gen, s, 17 * s + 3).unwrap();
            for p in simulate_prompts(&scene, &table, &cfg, 2).unwrap() {
                if let Some(bi) = scene.boxes.iter().position(|b| b.contains(p.x, p.y)) {
                    // Only check when a single box owns the point.
                    let owners = scene.boxes.iter().filter(|b| b.contains(p.x, p.y)).count();
                    if owners == 1 {
                        assert_eq!(p.proposed_label, scene.labels[bi]);
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_fidelity_is_config_error() {
        let cfg = PromptConfig { fidelity: 1.5, ..Default::default() };
        let scene = one_object_scene(0.5, 0.5, 0);
        assert!(matches!(
            synthesize_attention(&scene, &cfg, &mut rng(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn prompt_files_roundtrip_and_validate() {
        let dir = std::env::temp_dir().join("owqf_prompt_file_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("points.json");
        let mut prompts = std::collections::BTreeMap::new();
        prompts.insert(
            3u64,
            vec![PromptPoint { x: 0.25, y: 0.5, score: 0.9, proposed_label: 2 }],
        );
        prompts.insert(7u64, vec![]);
        save_prompt_file(&path, &prompts).unwrap();
        let back = load_prompt_file(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[&3][0].proposed_label, 2);
        assert_eq!(back[&3][0].x, 0.25);

        std::fs::write(
            &path,
            r#"[{"image_id": 1, "points": [{"x": 1.5, "y": 0.5, "score": 1.0, "label": 0}]}]"#,
        )
        .unwrap();
        assert!(matches!(load_prompt_file(&path), Err(Error::Precondition(_))));
    }
}
