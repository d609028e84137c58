//! Set-based training losses composed on the autodiff tape.
//!
//! Matching between predictions and ground truth is solved outside the tape
//! (assignment is piecewise constant, so it carries no gradient); the loss
//! terms themselves — focal alignment, L1, and generalized-IoU — are built
//! from tape primitives so gradients flow to box and score heads.

use serde::{Deserialize, Serialize};

use crate::denoise::{NoisePoint, Polarity};
use crate::error::{Error, Result};
use crate::geometry::{self, Box};
use crate::tensor::{Tape, TensorId};

/// Minimum-cost assignment for a dense `rows x cols` matrix, row-major.
/// Returns `min(rows, cols)` pairs `(row, col)`, sorted by row. O(n^3)
/// shortest-augmenting-path with potentials.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<(usize, usize)>> {
    if cost.len() != rows * cols {
        return Err(Error::Precondition(format!(
            "cost matrix length {} does not cover {rows} x {cols}",
            cost.len()
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("assignment costs must be finite".into()));
    }
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    if rows > cols {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = cost[i * cols + j];
            }
        }
        let mut swapped: Vec<(usize, usize)> = hungarian(&t, cols, rows)?
            .into_iter()
            .map(|(r, c)| (c, r))
            .collect();
        swapped.sort_unstable();
        return Ok(swapped);
    }

    let (n, m) = (rows, cols);
    // 1-indexed potentials; p[j] is the row matched to column j (0 = free).
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = Vec::with_capacity(n);
    for j in 1..=m {
        if p[j] != 0 {
            out.push((p[j] - 1, j - 1));
        }
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossWeights {
    pub focal_alpha: f64,
    /// Integer focal exponent; powers are composed by repeated multiply.
    pub focal_gamma: u32,
    pub w_class: f64,
    pub w_l1: f64,
    pub w_giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            focal_alpha: 0.25,
            focal_gamma: 2,
            w_class: 2.0,
            w_l1: 5.0,
            w_giou: 2.0,
        }
    }
}

/// Matching cost between every prediction and every ground-truth object:
/// `w_class * (1 - p) + w_l1 * L1 + w_giou * (1 - GIoU)` where `p` is the
/// predicted probability for the object's category. Row-major `[n_pred, n_gt]`.
pub fn matching_costs(
    pred_boxes: &[Box],
    class_prob_of_gt: &[f64],
    gt_boxes: &[Box],
    w: &LossWeights,
) -> Result<Vec<f64>> {
    let (n, m) = (pred_boxes.len(), gt_boxes.len());
    if class_prob_of_gt.len() != n * m {
        return Err(Error::Precondition(format!(
            "class probability table length {} does not cover {n} x {m}",
            class_prob_of_gt.len()
        )));
    }
    let mut cost = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            cost[i * m + j] = w.w_class * (1.0 - class_prob_of_gt[i * m + j])
                + w.w_l1 * geometry::l1(&pred_boxes[i], &gt_boxes[j])
                + w.w_giou * (1.0 - geometry::giou(&pred_boxes[i], &gt_boxes[j]));
        }
    }
    Ok(cost)
}

fn powi(tape: &mut Tape, x: TensorId, n: u32) -> Result<TensorId> {
    if n == 0 {
        let len: usize = tape.shape(x).iter().product();
        return tape.value(tape.shape(x).to_vec(), vec![1.0; len]);
    }
    let mut acc = x;
    for _ in 1..n {
        acc = tape.mul(acc, x)?;
    }
    Ok(acc)
}

/// Binary focal loss over a logit matrix against a {0,1} target mask,
/// summed over all entries:
/// `-[alpha * y * (1-p)^gamma * log p + (1-alpha) * (1-y) * p^gamma * log(1-p)]`.
pub fn focal_binary_sum(
    tape: &mut Tape,
    logits: TensorId,
    targets: &[f64],
    alpha: f64,
    gamma: u32,
) -> Result<TensorId> {
    let shape = tape.shape(logits).to_vec();
    let len: usize = shape.iter().product();
    if targets.len() != len {
        return Err(Error::Precondition(format!(
            "focal targets length {} does not match logits length {len}",
            targets.len()
        )));
    }
    if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Precondition("focal targets must be 0 or 1".into()));
    }
    let pos = tape.value(shape.clone(), targets.to_vec())?;
    let neg_targets: Vec<f64> = targets.iter().map(|t| 1.0 - t).collect();
    let neg = tape.value(shape, neg_targets)?;
    let neg_logits = tape.neg(logits);
    let p = tape.sigmoid(logits);
    let q = tape.sigmoid(neg_logits); // 1 - p without cancellation
    let log_p = tape.log_sigmoid(logits);
    let log_q = tape.log_sigmoid(neg_logits);
    let q_pow = powi(tape, q, gamma)?;
    let p_pow = powi(tape, p, gamma)?;
    let pos_term = tape.mul(q_pow, log_p)?;
    let neg_term = tape.mul(p_pow, log_q)?;
    let pos_masked = tape.mul(pos, pos_term)?;
    let neg_masked = tape.mul(neg, neg_term)?;
    let pos_scaled = tape.scale(pos_masked, alpha);
    let neg_scaled = tape.scale(neg_masked, 1.0 - alpha);
    let both = tape.add(pos_scaled, neg_scaled)?;
    let summed = tape.sum_all(both);
    Ok(tape.neg(summed))
}

fn corners(
    tape: &mut Tape,
    boxes: TensorId,
) -> Result<(TensorId, TensorId, TensorId, TensorId)> {
    let cx = tape.slice_cols(boxes, 0, 1)?;
    let cy = tape.slice_cols(boxes, 1, 1)?;
    let w = tape.slice_cols(boxes, 2, 1)?;
    let h = tape.slice_cols(boxes, 3, 1)?;
    let wh = tape.scale(w, 0.5);
    let hh = tape.scale(h, 0.5);
    let x1 = tape.sub(cx, wh)?;
    let y1 = tape.sub(cy, hh)?;
    let x2 = tape.add(cx, wh)?;
    let y2 = tape.add(cy, hh)?;
    Ok((x1, y1, x2, y2))
}

/// Generalized IoU between row-aligned `[k, 4]` center-size boxes, on tape.
/// Returns a `[k, 1]` tensor of GIoU values in [-1, 1].
pub fn giou_on_tape(tape: &mut Tape, pred: TensorId, gt: TensorId) -> Result<TensorId> {
    let (px1, py1, px2, py2) = corners(tape, pred)?;
    let (gx1, gy1, gx2, gy2) = corners(tape, gt)?;

    let ix1 = tape.max_elem(px1, gx1)?;
    let iy1 = tape.max_elem(py1, gy1)?;
    let ix2 = tape.min_elem(px2, gx2)?;
    let iy2 = tape.min_elem(py2, gy2)?;
    let iw_raw = tape.sub(ix2, ix1)?;
    let ih_raw = tape.sub(iy2, iy1)?;
    let iw = tape.relu(iw_raw);
    let ih = tape.relu(ih_raw);
    let inter = tape.mul(iw, ih)?;

    let pw = tape.sub(px2, px1)?;
    let ph = tape.sub(py2, py1)?;
    let gw = tape.sub(gx2, gx1)?;
    let gh = tape.sub(gy2, gy1)?;
    let pa = tape.mul(pw, ph)?;
    let ga = tape.mul(gw, gh)?;
    let areas = tape.add(pa, ga)?;
    let union = tape.sub(areas, inter)?;
    let iou = tape.div(inter, union)?;

    let ex1 = tape.min_elem(px1, gx1)?;
    let ey1 = tape.min_elem(py1, gy1)?;
    let ex2 = tape.max_elem(px2, gx2)?;
    let ey2 = tape.max_elem(py2, gy2)?;
    let ew = tape.sub(ex2, ex1)?;
    let eh = tape.sub(ey2, ey1)?;
    let ea = tape.mul(ew, eh)?;
    let gap = tape.sub(ea, union)?;
    let penalty = tape.div(gap, ea)?;
    tape.sub(iou, penalty)
}

/// Sum of coordinate L1 distances between row-aligned `[k, 4]` boxes, on tape.
pub fn l1_sum_on_tape(tape: &mut Tape, pred: TensorId, gt: TensorId) -> Result<TensorId> {
    let diff = tape.sub(pred, gt)?;
    let mag = tape.abs(diff);
    Ok(tape.sum_all(mag))
}

fn boxes_from_tape(tape: &Tape, id: TensorId) -> Result<Vec<Box>> {
    let shape = tape.shape(id);
    if shape.len() != 2 || shape[1] != 4 {
        return Err(Error::Precondition(format!(
            "expected [n, 4] box tensor, got {shape:?}"
        )));
    }
    let data = tape.data(id);
    Ok(data
        .chunks(4)
        .map(|c| Box::new(c[0], c[1], c[2], c[3]))
        .collect())
}

fn box_constant(tape: &mut Tape, boxes: &[Box]) -> Result<TensorId> {
    let mut data = Vec::with_capacity(boxes.len() * 4);
    for b in boxes {
        data.extend_from_slice(&b.as_array());
    }
    tape.value(vec![boxes.len(), 4], data)
}

/// Outcome of a set-matched loss: the scalar tape node plus the per-term
/// values (already normalized, before loss weights) for reporting.
#[derive(Debug, Clone)]
pub struct MatchedLoss {
    pub loss: TensorId,
    pub class_term: f64,
    pub l1_term: f64,
    pub giou_term: f64,
    pub matches: Vec<(usize, usize)>,
}

/// Grounding loss for one image: Hungarian-match predictions to ground truth
/// on (class probability, L1, GIoU) costs, then charge focal alignment over
/// all prediction-category pairs plus L1 and `1 - GIoU` over matched pairs.
/// All three terms are normalized by the ground-truth count (at least 1).
///
/// `pred_boxes` is `[n, 4]` normalized center-size, `pred_logits` is
/// `[n, n_categories]` alignment logits; both live on the tape. No
/// predictions means a zero loss: there is nothing to push gradient through.
pub fn grounding_loss(
    tape: &mut Tape,
    pred_boxes: TensorId,
    pred_logits: TensorId,
    gt_boxes: &[Box],
    gt_labels: &[usize],
    n_categories: usize,
    w: &LossWeights,
) -> Result<MatchedLoss> {
    let box_shape = tape.shape(pred_boxes).to_vec();
    let logit_shape = tape.shape(pred_logits).to_vec();
    if box_shape.len() != 2 || box_shape[1] != 4 {
        return Err(Error::Precondition(format!(
            "pred_boxes must be [n, 4], got {box_shape:?}"
        )));
    }
    if logit_shape != vec![box_shape[0], n_categories] {
        return Err(Error::Precondition(format!(
            "pred_logits must be [{}, {n_categories}], got {logit_shape:?}",
            box_shape[0]
        )));
    }
    if gt_boxes.len() != gt_labels.len() {
        return Err(Error::Precondition(format!(
            "{} gt boxes vs {} labels",
            gt_boxes.len(),
            gt_labels.len()
        )));
    }
    if let Some(&bad) = gt_labels.iter().find(|&&l| l >= n_categories) {
        return Err(Error::Precondition(format!(
            "gt label {bad} out of range for {n_categories} categories"
        )));
    }
    let n = box_shape[0];
    let m = gt_boxes.len();
    if n == 0 {
        return Ok(MatchedLoss {
            loss: tape.scalar(0.0),
            class_term: 0.0,
            l1_term: 0.0,
            giou_term: 0.0,
            matches: Vec::new(),
        });
    }

    let norm = m.max(1) as f64;
    let matches = if m > 0 {
        let pb = boxes_from_tape(tape, pred_boxes)?;
        let logits = tape.data(pred_logits).to_vec();
        let mut probs = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                probs[i * m + j] = geometry::sigmoid(logits[i * n_categories + gt_labels[j]]);
            }
        }
        let cost = matching_costs(&pb, &probs, gt_boxes, w)?;
        hungarian(&cost, n, m)?
    } else {
        Vec::new()
    };

    // Focal alignment over every (prediction, category) pair; matched pairs
    // are positives at the object's category.
    let mut targets = vec![0.0; n * n_categories];
    for &(i, j) in &matches {
        targets[i * n_categories + gt_labels[j]] = 1.0;
    }
    let focal = focal_binary_sum(tape, pred_logits, &targets, w.focal_alpha, w.focal_gamma)?;
    let class_term = tape.scale(focal, 1.0 / norm);

    let (l1_term, giou_term) = if matches.is_empty() {
        (tape.scalar(0.0), tape.scalar(0.0))
    } else {
        let rows: Vec<usize> = matches.iter().map(|&(i, _)| i).collect();
        let matched_pred = tape.gather_rows(pred_boxes, &rows)?;
        let matched_gt: Vec<Box> = matches.iter().map(|&(_, j)| gt_boxes[j]).collect();
        let gt_const = box_constant(tape, &matched_gt)?;
        let l1 = l1_sum_on_tape(tape, matched_pred, gt_const)?;
        let l1_term = tape.scale(l1, 1.0 / norm);
        let giou = giou_on_tape(tape, matched_pred, gt_const)?;
        let giou_sum = tape.sum_all(giou);
        // sum(1 - giou) = k - sum(giou)
        let negated = tape.scale(giou_sum, -1.0);
        let k_minus = tape.shift(negated, matches.len() as f64);
        let giou_term = tape.scale(k_minus, 1.0 / norm);
        (l1_term, giou_term)
    };

    let class_w = tape.scale(class_term, w.w_class);
    let l1_w = tape.scale(l1_term, w.w_l1);
    let giou_w = tape.scale(giou_term, w.w_giou);
    let partial = tape.add(class_w, l1_w)?;
    let loss = tape.add(partial, giou_w)?;
    Ok(MatchedLoss {
        loss,
        class_term: tape.data(class_term)[0],
        l1_term: tape.data(l1_term)[0],
        giou_term: tape.data(giou_term)[0],
        matches,
    })
}

/// Denoising loss over a flat run of noised points (groups concatenated in
/// order). Positive points are charged focal alignment toward their source
/// object's category plus L1 and `1 - GIoU` against the source box; negative
/// points are charged focal alignment with an all-zero target (background).
/// The class term is normalized by the total point count, box terms by the
/// positive count — negatives carry no box target.
pub fn denoising_loss(
    tape: &mut Tape,
    dn_boxes: TensorId,
    dn_logits: TensorId,
    points: &[NoisePoint],
    gt_boxes: &[Box],
    gt_labels: &[usize],
    n_categories: usize,
    w: &LossWeights,
) -> Result<MatchedLoss> {
    let box_shape = tape.shape(dn_boxes).to_vec();
    let logit_shape = tape.shape(dn_logits).to_vec();
    let p = points.len();
    if box_shape != vec![p, 4] || logit_shape != vec![p, n_categories] {
        return Err(Error::Precondition(format!(
            "denoising tensors must be [{p}, 4] and [{p}, {n_categories}], got {box_shape:?} and {logit_shape:?}"
        )));
    }
    if p == 0 {
        return Ok(MatchedLoss {
            loss: tape.scalar(0.0),
            class_term: 0.0,
            l1_term: 0.0,
            giou_term: 0.0,
            matches: Vec::new(),
        });
    }
    for pt in points {
        if pt.source_box >= gt_boxes.len() || pt.source_box >= gt_labels.len() {
            return Err(Error::Precondition(format!(
                "noise point references source box {} beyond {} ground-truth objects",
                pt.source_box,
                gt_boxes.len()
            )));
        }
    }
    if let Some(&bad) = gt_labels.iter().find(|&&l| l >= n_categories) {
        return Err(Error::Precondition(format!(
            "gt label {bad} out of range for {n_categories} categories"
        )));
    }

    let mut targets = vec![0.0; p * n_categories];
    let mut pos_rows = Vec::new();
    for (r, pt) in points.iter().enumerate() {
        if pt.polarity == Polarity::Positive {
            targets[r * n_categories + gt_labels[pt.source_box]] = 1.0;
            pos_rows.push(r);
        }
    }
    let focal = focal_binary_sum(tape, dn_logits, &targets, w.focal_alpha, w.focal_gamma)?;
    let class_term = tape.scale(focal, 1.0 / p as f64);

    let (l1_term, giou_term) = if pos_rows.is_empty() {
        (tape.scalar(0.0), tape.scalar(0.0))
    } else {
        let k = pos_rows.len() as f64;
        let matched_pred = tape.gather_rows(dn_boxes, &pos_rows)?;
        let matched_gt: Vec<Box> = pos_rows
            .iter()
            .map(|&r| gt_boxes[points[r].source_box])
            .collect();
        let gt_const = box_constant(tape, &matched_gt)?;
        let l1 = l1_sum_on_tape(tape, matched_pred, gt_const)?;
        let l1_term = tape.scale(l1, 1.0 / k);
        let giou = giou_on_tape(tape, matched_pred, gt_const)?;
        let giou_sum = tape.sum_all(giou);
        let negated = tape.scale(giou_sum, -1.0);
        let k_minus = tape.shift(negated, k);
        let giou_term = tape.scale(k_minus, 1.0 / k);
        (l1_term, giou_term)
    };

    let class_w = tape.scale(class_term, w.w_class);
    let l1_w = tape.scale(l1_term, w.w_l1);
    let giou_w = tape.scale(giou_term, w.w_giou);
    let partial = tape.add(class_w, l1_w)?;
    let loss = tape.add(partial, giou_w)?;
    let matches = pos_rows
        .iter()
        .map(|&r| (r, points[r].source_box))
        .collect();
    Ok(MatchedLoss {
        loss,
        class_term: tape.data(class_term)[0],
        l1_term: tape.data(l1_term)[0],
        giou_term: tape.data(giou_term)[0],
        matches,
    })
}

/// Per-step loss summary for logging and curves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub grounding_class: f64,
    pub grounding_l1: f64,
    pub grounding_giou: f64,
    pub denoising_class: f64,
    pub denoising_l1: f64,
    pub denoising_giou: f64,
    pub n_matched: usize,
    pub n_denoising_points: usize,
}

impl LossReport {
    pub fn zero() -> Self {
        LossReport {
            total: 0.0,
            grounding_class: 0.0,
            grounding_l1: 0.0,
            grounding_giou: 0.0,
            denoising_class: 0.0,
            denoising_l1: 0.0,
            denoising_giou: 0.0,
            n_matched: 0,
            n_denoising_points: 0,
        }
    }
}
