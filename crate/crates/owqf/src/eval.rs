//! Fixed-AP evaluation with rarity buckets, plus the two vocabulary modes.
//!
//! The "fixed" protocol pools detections per category across the whole
//! dataset and caps them there (not per image), greedy-matches in score
//! order at each IoU threshold, and averages 101-point interpolated AP over
//! thresholds. Categories without ground truth are excluded from every
//! mean; a bucket whose categories all lack ground truth reports no number
//! rather than a fake zero.
//!
//! Open-set mode classifies specific queries against a predefined category
//! list and point queries against that list plus whatever the prompt stack
//! discovered. Open-ended mode uses discovered labels only, then maps each
//! detection back onto the category table by cosine similarity.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::EvalKnobs;
use crate::error::{Error, Result};
use crate::geometry::{self, Box};
use crate::model::{DetectConfig, OpenWorldModel};
use crate::train::TrainWorld;
use crate::world::{Bucket, CategoryTable, Scene};

/// A scored box attributed to a category id in the evaluation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    #[serde(rename = "box")]
    pub box_: Box,
    pub score: f64,
    pub label: usize,
}

/// A detection whose category is still a free-form embedding (open-ended
/// mode before mapping onto the table).
#[derive(Debug, Clone)]
pub struct EmbeddedDetection {
    pub image_id: u64,
    pub box_: Box,
    pub score: f64,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MappedDetection {
    pub detection: Detection,
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    OpenSet,
    OpenEnded,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::OpenSet => "open-set",
            EvalMode::OpenEnded => "open-ended",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category: usize,
    pub bucket: Bucket,
    pub gt_count: usize,
    /// Absent when the category has no ground truth to measure against.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: u32,
    pub mode: String,
    /// Mean AP over categories with ground truth.
    pub ap: f64,
    pub ap_r: Option<f64>,
    pub ap_c: Option<f64>,
    pub ap_f: Option<f64>,
    pub per_category: Vec<CategoryAp>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("eval report", e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let report: EvalReport =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if report.schema != 1 {
            return Err(Error::Consistency(format!(
                "unsupported report schema {}",
                report.schema
            )));
        }
        Ok(report)
    }
}

/// The standard threshold sweep 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Greedy matching flags for one category at one threshold: detections in
/// order try to claim their image's unmatched ground truth with the highest
/// overlap (ties to the lowest index).
fn match_flags(
    dets: &[&Detection],
    gt_by_image: &BTreeMap<u64, Vec<&Box>>,
    thr: f64,
) -> Vec<bool> {
    let mut used: BTreeMap<u64, Vec<bool>> = gt_by_image
        .iter()
        .map(|(&id, v)| (id, vec![false; v.len()]))
        .collect();
    let mut flags = Vec::with_capacity(dets.len());
    for det in dets {
        let hit = match gt_by_image.get(&det.image_id) {
            None => false,
            Some(gts) => {
                let marks = used.get_mut(&det.image_id).expect("mark row");
                let mut best: Option<(usize, f64)> = None;
                for (j, gt) in gts.iter().enumerate() {
                    if marks[j] {
                        continue;
                    }
                    let v = geometry::iou(&det.box_, gt);
                    if best.map_or(true, |(_, b)| v > b) {
                        best = Some((j, v));
                    }
                }
                match best {
                    Some((j, v)) if v >= thr => {
                        marks[j] = true;
                        true
                    }
                    _ => false,
                }
            }
        };
        flags.push(hit);
    }
    flags
}

/// 101-point interpolated AP from ordered hit flags.
fn interpolated_ap(flags: &[bool], npos: usize) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    let n = flags.len();
    let mut prec = Vec::with_capacity(n);
    let mut rec = Vec::with_capacity(n);
    let mut tp = 0usize;
    for (k, &hit) in flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / npos as f64);
    }
    // Precision envelope: best precision at this recall or beyond.
    let mut env = prec.clone();
    for k in (0..n - 1).rev() {
        env[k] = env[k].max(env[k + 1]);
    }
    let mut total = 0.0;
    let mut k = 0usize;
    for j in 0..=100 {
        let r = j as f64 / 100.0;
        while k < n && rec[k] < r {
            k += 1;
        }
        if k == n {
            break;
        }
        total += env[k];
    }
    total / 101.0
}

/// Pool per category, cap, sweep thresholds, average; then macro-average
/// per bucket over categories that have ground truth.
pub fn fixed_ap(
    dets: &[Detection],
    scenes: &[Scene],
    buckets: &[Bucket],
    thresholds: &[f64],
    per_class_cap: usize,
) -> Result<EvalReport> {
    let n_cat = buckets.len();
    if per_class_cap == 0 {
        return Err(Error::Precondition("per_class_cap must be positive".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::Precondition("threshold sweep must be nonempty".into()));
    }
    for d in dets {
        if d.label >= n_cat {
            return Err(Error::Consistency(format!(
                "detection label {} outside the {n_cat}-category table",
                d.label
            )));
        }
        if !d.score.is_finite() {
            return Err(Error::Consistency(format!(
                "non-finite detection score {}",
                d.score
            )));
        }
    }

    // Ground truth boxes grouped as category -> image -> boxes.
    let mut gt: Vec<BTreeMap<u64, Vec<&Box>>> = vec![BTreeMap::new(); n_cat];
    let mut gt_count = vec![0usize; n_cat];
    for scene in scenes {
        for (b, &l) in scene.boxes.iter().zip(&scene.labels) {
            if l >= n_cat {
                return Err(Error::Consistency(format!(
                    "ground-truth label {l} outside the {n_cat}-category table"
                )));
            }
            gt[l].entry(scene.image_id).or_default().push(b);
            gt_count[l] += 1;
        }
    }

    let mut per_category = Vec::with_capacity(n_cat);
    for c in 0..n_cat {
        let ap = if gt_count[c] == 0 {
            None
        } else {
            // Dataset-wide pool for this category, sorted by score with
            // input order breaking ties, then capped.
            let mut pool: Vec<(usize, &Detection)> =
                dets.iter().enumerate().filter(|(_, d)| d.label == c).collect();
            pool.sort_by(|a, b| {
                b.1.score
                    .partial_cmp(&a.1.score)
                    .expect("finite scores")
                    .then(a.0.cmp(&b.0))
            });
            pool.truncate(per_class_cap);
            let ordered: Vec<&Detection> = pool.into_iter().map(|(_, d)| d).collect();
            let mut acc = 0.0;
            for &thr in thresholds {
                let flags = match_flags(&ordered, &gt[c], thr);
                acc += interpolated_ap(&flags, gt_count[c]);
            }
            Some(acc / thresholds.len() as f64)
        };
        per_category.push(CategoryAp {
            category: c,
            bucket: buckets[c],
            gt_count: gt_count[c],
            ap,
        });
    }

    let mean_where = |pred: &dyn Fn(&CategoryAp) -> bool| -> Option<f64> {
        let vals: Vec<f64> = per_category
            .iter()
            .filter(|r| pred(r))
            .filter_map(|r| r.ap)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let ap = mean_where(&|_| true).unwrap_or(0.0);
    let ap_r = mean_where(&|r| r.bucket == Bucket::Rare);
    let ap_c = mean_where(&|r| r.bucket == Bucket::Common);
    let ap_f = mean_where(&|r| r.bucket == Bucket::Frequent);
    Ok(EvalReport {
        schema: 1,
        mode: String::new(),
        ap,
        ap_r,
        ap_c,
        ap_f,
        per_category,
    })
}

/// Resolve free-form label embeddings onto the table by cosine similarity
/// (table embeddings are unit-norm). Ties break toward the lower index.
pub fn open_ended_map(
    dets: &[EmbeddedDetection],
    table: &CategoryTable,
) -> Result<Vec<MappedDetection>> {
    if table.is_empty() {
        return Err(Error::Config("cannot map labels onto an empty category table".into()));
    }
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        if d.embedding.len() != table.d_text {
            return Err(Error::Consistency(format!(
                "label embedding width {} does not match the table's {}",
                d.embedding.len(),
                table.d_text
            )));
        }
        let norm = d.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric(
                "zero-norm label embedding cannot be mapped".into(),
            ));
        }
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for (c, cat) in table.categories.iter().enumerate() {
            let dot: f64 = d
                .embedding
                .iter()
                .zip(&cat.embedding)
                .map(|(a, b)| a * b)
                .sum();
            let sim = dot / norm;
            if sim > best_sim {
                best_sim = sim;
                best = c;
            }
        }
        out.push(MappedDetection {
            detection: Detection {
                image_id: d.image_id,
                box_: d.box_,
                score: d.score,
                label: best,
            },
            similarity: best_sim,
        });
    }
    Ok(out)
}

/// Anything that can produce detections for an image of a [`TrainWorld`].
///
/// `spec_ids` are the categories the grid path may emit; `gen_ids` (a
/// superset, list first) are available to the point path. Labels in the
/// result are table category ids.
pub trait Detector {
    fn detect(&self, image_idx: usize, spec_ids: &[usize], gen_ids: &[usize])
        -> Result<Vec<Detection>>;
}

/// The trained model as a [`Detector`].
pub struct ModelDetector<'a> {
    pub model: &'a OpenWorldModel,
    pub world: &'a TrainWorld,
    pub dcfg: DetectConfig,
}

impl<'a> ModelDetector<'a> {
    pub fn new(model: &'a OpenWorldModel, world: &'a TrainWorld, knobs: &EvalKnobs) -> Self {
        ModelDetector {
            model,
            world,
            dcfg: DetectConfig {
                score_threshold: knobs.score_threshold,
                max_detections: knobs.max_detections,
                nms_iou: knobs.nms_iou,
            },
        }
    }
}

impl Detector for ModelDetector<'_> {
    fn detect(
        &self,
        image_idx: usize,
        spec_ids: &[usize],
        gen_ids: &[usize],
    ) -> Result<Vec<Detection>> {
        if gen_ids.is_empty() {
            return Ok(Vec::new());
        }
        let table = &self.world.table;
        let vocab: Vec<Vec<f64>> = gen_ids
            .iter()
            .map(|&id| table.embedding(id).map(<[f64]>::to_vec))
            .collect::<Result<_>>()?;
        let scene = &self.world.scenes[image_idx];
        let dets = self.model.detect_within(
            &self.world.pyramids[image_idx],
            &vocab,
            spec_ids.len().max(1).min(vocab.len()),
            &self.world.prompts[image_idx],
            &self.dcfg,
        )?;
        Ok(dets
            .into_iter()
            .map(|d| Detection {
                image_id: scene.image_id,
                box_: d.box_,
                score: d.score,
                label: gen_ids[d.label],
            })
            .collect())
    }
}

/// Sorted unique proposed labels of one image's prompt points.
fn discovered_ids(world: &TrainWorld, image_idx: usize, n_cat: usize) -> Result<Vec<usize>> {
    let mut set = BTreeSet::new();
    for p in &world.prompts[image_idx] {
        if p.proposed_label >= n_cat {
            return Err(Error::Consistency(format!(
                "prompt label {} outside the {n_cat}-category table",
                p.proposed_label
            )));
        }
        set.insert(p.proposed_label);
    }
    Ok(set.into_iter().collect())
}

/// Run a detector over the whole world in the chosen mode; labels in the
/// result are table ids (open-ended labels already mapped back).
pub fn collect_detections(
    detector: &dyn Detector,
    world: &TrainWorld,
    mode: EvalMode,
    predefined: &[usize],
) -> Result<Vec<Detection>> {
    let table = &world.table;
    let n_cat = table.len();
    for &id in predefined {
        if id >= n_cat {
            return Err(Error::Consistency(format!(
                "category list entry {id} outside the {n_cat}-category table"
            )));
        }
    }
    let mut all: Vec<Detection> = Vec::new();
    match mode {
        EvalMode::OpenSet => {
            if predefined.is_empty() {
                return Err(Error::Config(
                    "open-set evaluation requires a category list; \
                     run open-ended mode to use discovered labels only"
                        .into(),
                ));
            }
            let listed: BTreeSet<usize> = predefined.iter().copied().collect();
            for i in 0..world.scenes.len() {
                let mut gen_ids = predefined.to_vec();
                for id in discovered_ids(world, i, n_cat)? {
                    if !listed.contains(&id) {
                        gen_ids.push(id);
                    }
                }
                all.extend(detector.detect(i, predefined, &gen_ids)?);
            }
        }
        EvalMode::OpenEnded => {
            for i in 0..world.scenes.len() {
                let ids = discovered_ids(world, i, n_cat)?;
                if ids.is_empty() {
                    continue;
                }
                let dets = detector.detect(i, &ids, &ids)?;
                // Labels travel as embeddings and are re-resolved against
                // the table, exercising the mapping path end to end.
                let embedded: Vec<EmbeddedDetection> = dets
                    .into_iter()
                    .map(|d| {
                        Ok(EmbeddedDetection {
                            image_id: d.image_id,
                            box_: d.box_,
                            score: d.score,
                            embedding: table.embedding(d.label)?.to_vec(),
                        })
                    })
                    .collect::<Result<_>>()?;
                all.extend(open_ended_map(&embedded, table)?.into_iter().map(|m| m.detection));
            }
        }
    }
    Ok(all)
}

/// Detect everywhere, then score: the whole evaluation in one call.
pub fn evaluate(
    detector: &dyn Detector,
    world: &TrainWorld,
    mode: EvalMode,
    predefined: &[usize],
    knobs: &EvalKnobs,
) -> Result<EvalReport> {
    let dets = collect_detections(detector, world, mode, predefined)?;
    score_detections(&dets, world, mode, knobs)
}

/// Score pre-collected detections against a world's ground truth.
pub fn score_detections(
    dets: &[Detection],
    world: &TrainWorld,
    mode: EvalMode,
    knobs: &EvalKnobs,
) -> Result<EvalReport> {
    let buckets: Vec<Bucket> = world.table.categories.iter().map(|c| c.bucket).collect();
    let mut report = fixed_ap(
        dets,
        &world.scenes,
        &buckets,
        &iou_thresholds(),
        knobs.per_class_cap,
    )?;
    report.mode = mode.as_str().to_string();
    Ok(report)
}

// ---- prediction files -------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PredictionsFile {
    schema: u32,
    predictions: Vec<Detection>,
}

pub fn save_predictions(path: &Path, dets: &[Detection]) -> Result<()> {
    let file = PredictionsFile { schema: 1, predictions: dets.to_vec() };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json("predictions", e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_predictions(path: &Path) -> Result<Vec<Detection>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: PredictionsFile =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if file.schema != 1 {
        return Err(Error::Consistency(format!(
            "unsupported predictions schema {}",
            file.schema
        )));
    }
    Ok(file.predictions)
}

// ---- external ground truth --------------------------------------------------

#[derive(Deserialize)]
struct LvisImage {
    id: u64,
    width: f64,
    height: f64,
}

#[derive(Deserialize)]
struct LvisAnnotation {
    image_id: u64,
    category_id: u64,
    /// Pixel-space [x, y, w, h], top-left origin.
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct LvisCategory {
    id: u64,
    frequency: String,
}

#[derive(Deserialize)]
struct LvisDoc {
    images: Vec<LvisImage>,
    annotations: Vec<LvisAnnotation>,
    categories: Vec<LvisCategory>,
}

/// Load ground truth in the LVIS annotation schema: scenes with normalized
/// center-size boxes plus each category's rarity bucket. Category ids map
/// to contiguous indices in ascending id order.
pub fn load_lvis_ground_truth(path: &Path) -> Result<(Vec<Scene>, Vec<Bucket>)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let doc: LvisDoc =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;

    let mut cats = doc.categories;
    cats.sort_by_key(|c| c.id);
    let mut buckets = Vec::with_capacity(cats.len());
    let mut cat_index: BTreeMap<u64, usize> = BTreeMap::new();
    for (i, c) in cats.iter().enumerate() {
        if cat_index.insert(c.id, i).is_some() {
            return Err(Error::Consistency(format!("duplicate category id {}", c.id)));
        }
        buckets.push(match c.frequency.as_str() {
            "r" => Bucket::Rare,
            "c" => Bucket::Common,
            "f" => Bucket::Frequent,
            other => {
                return Err(Error::Consistency(format!(
                    "category {} has unknown frequency {other:?}",
                    c.id
                )))
            }
        });
    }

    let mut images = doc.images;
    images.sort_by_key(|im| im.id);
    let mut scene_index: BTreeMap<u64, usize> = BTreeMap::new();
    let mut scenes: Vec<Scene> = Vec::with_capacity(images.len());
    for im in &images {
        if im.width <= 0.0 || im.height <= 0.0 {
            return Err(Error::Consistency(format!(
                "image {} has non-positive size {}x{}",
                im.id, im.width, im.height
            )));
        }
        if scene_index.insert(im.id, scenes.len()).is_some() {
            return Err(Error::Consistency(format!("duplicate image id {}", im.id)));
        }
        scenes.push(Scene {
            image_id: im.id,
            seed: 0,
            boxes: Vec::new(),
            labels: Vec::new(),
        });
    }

    for ann in &doc.annotations {
        let &si = scene_index.get(&ann.image_id).ok_or_else(|| {
            Error::Consistency(format!("annotation references unknown image {}", ann.image_id))
        })?;
        let &ci = cat_index.get(&ann.category_id).ok_or_else(|| {
            Error::Consistency(format!(
                "annotation references unknown category {}",
                ann.category_id
            ))
        })?;
        let [x, y, w, h] = ann.bbox;
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Consistency(format!(
                "annotation on image {} has degenerate box {:?}",
                ann.image_id, ann.bbox
            )));
        }
        let im = &images[si];
        scenes[si].boxes.push(Box::new(
            (x + w / 2.0) / im.width,
            (y + h / 2.0) / im.height,
            w / im.width,
            h / im.height,
        ));
        scenes[si].labels.push(ci);
    }
    Ok((scenes, buckets))
}

/// Deliberately naive reference implementations, kept for tests to compare
/// the production evaluator against. Different code path on purpose: no
/// envelope, no incremental counting — every prefix is rescored from
/// scratch.
#[doc(hidden)]
pub mod oracle {
    use super::*;

    /// Reference fixed AP for a single category.
    pub fn category_ap(
        dets: &[(u64, Box, f64)],
        gts: &[(u64, Box)],
        thresholds: &[f64],
        cap: usize,
    ) -> Option<f64> {
        if gts.is_empty() {
            return None;
        }
        let mut pool: Vec<(usize, &(u64, Box, f64))> = dets.iter().enumerate().collect();
        pool.sort_by(|a, b| b.1 .2.partial_cmp(&a.1 .2).unwrap().then(a.0.cmp(&b.0)));
        pool.truncate(cap);
        let ordered: Vec<&(u64, Box, f64)> = pool.into_iter().map(|(_, d)| d).collect();

        let npos = gts.len() as f64;
        let mut total = 0.0;
        for &thr in thresholds {
            // True-positive count of each prefix, rescored from scratch.
            let tp_of_prefix = |k: usize| -> usize {
                let mut used = vec![false; gts.len()];
                let mut tp = 0usize;
                for det in &ordered[..k] {
                    let mut best: Option<(usize, f64)> = None;
                    for (j, gt) in gts.iter().enumerate() {
                        if used[j] || gt.0 != det.0 {
                            continue;
                        }
                        let v = geometry::iou(&det.1, &gt.1);
                        if best.map_or(true, |(_, b)| v > b) {
                            best = Some((j, v));
                        }
                    }
                    if let Some((j, v)) = best {
                        if v >= thr {
                            used[j] = true;
                            tp += 1;
                        }
                    }
                }
                tp
            };
            let mut points = Vec::with_capacity(ordered.len());
            for k in 1..=ordered.len() {
                let tp = tp_of_prefix(k) as f64;
                points.push((tp / npos, tp / k as f64));
            }
            let mut ap = 0.0;
            for j in 0..=100 {
                let r = j as f64 / 100.0;
                let best = points
                    .iter()
                    .filter(|(rec, _)| *rec >= r)
                    .map(|(_, p)| *p)
                    .fold(f64::NEG_INFINITY, f64::max);
                if best.is_finite() {
                    ap += best;
                }
            }
            total += ap / 101.0;
        }
        Some(total / thresholds.len() as f64)
    }
}
