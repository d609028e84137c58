//! Query construction: turning point prompts and grid proposals into the
//! content/position pairs the decoder consumes.
//!
//! Point prompts are featurized by bilinear interpolation across the pyramid
//! and ranked into a fixed bank of learnable query slots; grid proposals come
//! from the top-scoring encoder cells. Both paths share the same initial box
//! parameterization: an anchor at the source location with a fixed size
//! prior, refined in logit space.

use crate::error::{Error, Result};
use crate::geometry::{logit, Box};
use crate::nn::{Frame, ParamId, ParamStore};
use crate::tensor::{Tape, TensorId};
use crate::world::FeaturePyramid;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Width/height assigned to a query box before any refinement.
pub const SIZE_PRIOR: f64 = 0.1;

/// Mean of the bilinear samples of every pyramid level at a normalized
/// image location.
pub fn interpolate_point_feature(pyramid: &FeaturePyramid, x: f64, y: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(Error::Precondition(format!(
            "point ({x}, {y}) outside the unit square"
        )));
    }
    if pyramid.levels.is_empty() {
        return Err(Error::Precondition("pyramid has no levels".into()));
    }
    let d = pyramid.feature_dim();
    let mut acc = vec![0.0; d];
    for level in &pyramid.levels {
        for (a, v) in acc.iter_mut().zip(level.bilinear(x, y)) {
            *a += v;
        }
    }
    let k = pyramid.levels.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

/// Pyramid flattened to a token matrix for cross-attention and proposal
/// scoring: `[total_cells, d]` features plus each cell's normalized center.
#[derive(Debug, Clone)]
pub struct FlatPyramid {
    pub features: Vec<f64>,
    pub coords: Vec<(f64, f64)>,
    pub level_of: Vec<usize>,
    pub t: usize,
    pub d: usize,
}

pub fn flatten_pyramid(pyramid: &FeaturePyramid) -> Result<FlatPyramid> {
    if pyramid.levels.is_empty() {
        return Err(Error::Precondition("pyramid has no levels".into()));
    }
    let d = pyramid.feature_dim();
    let t = pyramid.total_cells();
    let mut features = Vec::with_capacity(t * d);
    let mut coords = Vec::with_capacity(t);
    let mut level_of = Vec::with_capacity(t);
    for (li, level) in pyramid.levels.iter().enumerate() {
        for i in 0..level.h {
            for j in 0..level.w {
                features.extend_from_slice(level.at(i, j));
                coords.push((
                    (j as f64 + 0.5) / level.w as f64,
                    (i as f64 + 0.5) / level.h as f64,
                ));
                level_of.push(li);
            }
        }
    }
    Ok(FlatPyramid {
        features,
        coords,
        level_of,
        t,
        d,
    })
}

/// A fixed-size bank of learnable query embeddings living in the parameter
/// store. Slots are consumed in rank order.
#[derive(Debug, Clone)]
pub struct QueryBank {
    pub param: ParamId,
    pub n: usize,
    pub d: usize,
}

impl QueryBank {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        n: usize,
        d: usize,
    ) -> Result<Self> {
        let dist = Normal::new(0.0, 0.02).expect("finite std");
        let data: Vec<f64> = (0..n * d).map(|_| dist.sample(rng)).collect();
        let param = store.add(name, vec![n, d], data)?;
        Ok(QueryBank { param, n, d })
    }

    /// The full bank on the tape, `[n, d]`.
    pub fn inject(&self, frame: &mut Frame, store: &ParamStore, tape: &mut Tape) -> Result<TensorId> {
        frame.inject(store, tape, self.param)
    }
}

/// Rank candidates by score, best first, and keep at most `n_slots` of them.
/// Ties preserve candidate order; the result is a list of candidate indices.
/// The outcome depends only on the ordering of the scores, not their values,
/// and surplus candidates beyond the slot count are discarded.
pub fn rank_and_match(scores: &[f64], n_slots: usize) -> Result<Vec<usize>> {
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("ranking scores must not be NaN".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    order.truncate(n_slots);
    Ok(order)
}

/// Initial box for a query sourced at `(x, y)`: the anchor center with the
/// fixed size prior, expressed in logit space so refinement deltas compose
/// additively.
pub fn anchor_box(x: f64, y: f64) -> Box {
    Box::new(x, y, SIZE_PRIOR, SIZE_PRIOR)
}

/// Logit-space anchors for a batch of points, row-major `[k, 4]`.
pub fn anchor_logits(points: &[(f64, f64)]) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len() * 4);
    for &(x, y) in points {
        out.push(logit(x));
        out.push(logit(y));
        out.push(logit(SIZE_PRIOR));
        out.push(logit(SIZE_PRIOR));
    }
    out
}

/// Deterministic per-image seed mixing for subsystems that draw randomness.
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(salt)
        .wrapping_mul(0x2545_f491_4f6c_dd1d)
}

pub fn seeded_rng(base: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(base, salt))
}
