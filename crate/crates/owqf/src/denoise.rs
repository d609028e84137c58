//! Noisy-point sampling around ground-truth boxes and the attention mask
//! that keeps denoising groups from leaking into each other or into the
//! matching queries.
//!
//! For a box with extent `w` (resp. `h`), a positive point offsets the
//! center by `|dx| < lambda1 * w / 2` in each axis and a negative point by
//! `lambda1 * w / 2 < |dx| < lambda2 * w / 2` in each axis, both sampled
//! uniformly with strict bounds. When `lambda1 == lambda2` the negative band
//! is empty and the sampler falls back to placing the offset exactly on the
//! boundary with a random sign. Coordinates clamp to [0, 1] afterwards.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Box;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DenoisingConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub groups_per_image: usize,
}

impl Default for DenoisingConfig {
    fn default() -> Self {
        DenoisingConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            groups_per_image: 3,
        }
    }
}

impl DenoisingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0) || !self.lambda1.is_finite() {
            return Err(Error::Config(format!(
                "dn.lambda1 must be positive and finite, got {}",
                self.lambda1
            )));
        }
        if !(self.lambda2 >= self.lambda1) || !self.lambda2.is_finite() {
            return Err(Error::Config(format!(
                "dn.lambda2 must satisfy lambda1 <= lambda2, got lambda1={} lambda2={}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy)]
pub struct NoisePoint {
    pub x: f64,
    pub y: f64,
    pub polarity: Polarity,
    pub group: usize,
    /// Index of the ground-truth box this point was sampled around.
    pub source_box: usize,
}

/// Uniform draw from the open interval `(-bound, bound)`.
fn open_symmetric(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    loop {
        let v = rng.random_range(-bound..bound);
        if v.abs() < bound && v != -bound {
            return v;
        }
    }
}

/// Uniform magnitude from the open band `(lo, hi)` with a random sign.
fn open_band_signed(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let mag = loop {
        let v = rng.random_range(lo..hi);
        if v > lo {
            break v;
        }
    };
    if rng.random_range(0..2) == 0 {
        mag
    } else {
        -mag
    }
}

fn boundary_signed(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if rng.random_range(0..2) == 0 {
        bound
    } else {
        -bound
    }
}

/// Sample `groups_per_image` denoising groups; each group holds one positive
/// and one negative point per ground-truth box, in box order. Empty ground
/// truth yields empty groups.
pub fn sample_groups(
    gt_boxes: &[Box],
    cfg: &DenoisingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<NoisePoint>>> {
    cfg.validate()?;
    let degenerate_band = cfg.lambda1 == cfg.lambda2;
    let mut groups = Vec::with_capacity(cfg.groups_per_image);
    for g in 0..cfg.groups_per_image {
        let mut points = Vec::with_capacity(gt_boxes.len() * 2);
        for (bi, b) in gt_boxes.iter().enumerate() {
            let half_w = cfg.lambda1 * b.w / 2.0;
            let half_h = cfg.lambda1 * b.h / 2.0;
            let px = b.cx + open_symmetric(rng, half_w);
            let py = b.cy + open_symmetric(rng, half_h);
            points.push(NoisePoint {
                x: px.clamp(0.0, 1.0),
                y: py.clamp(0.0, 1.0),
                polarity: Polarity::Positive,
                group: g,
                source_box: bi,
            });

            let (nx, ny) = if degenerate_band {
                (
                    b.cx + boundary_signed(rng, half_w),
                    b.cy + boundary_signed(rng, half_h),
                )
            } else {
                let hi_w = cfg.lambda2 * b.w / 2.0;
                let hi_h = cfg.lambda2 * b.h / 2.0;
                (
                    b.cx + open_band_signed(rng, half_w, hi_w),
                    b.cy + open_band_signed(rng, half_h, hi_h),
                )
            };
            points.push(NoisePoint {
                x: nx.clamp(0.0, 1.0),
                y: ny.clamp(0.0, 1.0),
                polarity: Polarity::Negative,
                group: g,
                source_box: bi,
            });
        }
        groups.push(points);
    }
    Ok(groups)
}

/// Square attention mask over `[denoising | general | specific]` query rows,
/// `true` = blocked. Denoising queries of one group cannot attend to other
/// groups; matching (general + specific) queries cannot attend to any
/// denoising query; all other attention is permitted.
pub fn denoising_attention_mask(
    group_sizes: &[usize],
    n_general: usize,
    n_specific: usize,
) -> Vec<bool> {
    let dn_total: usize = group_sizes.iter().sum();
    let total = dn_total + n_general + n_specific;
    let mut mask = vec![false; total * total];

    // Group id per denoising row.
    let mut group_of = Vec::with_capacity(dn_total);
    for (g, &sz) in group_sizes.iter().enumerate() {
        group_of.extend(std::iter::repeat(g).take(sz));
    }

    for i in 0..dn_total {
        for j in 0..dn_total {
            if group_of[i] != group_of[j] {
                mask[i * total + j] = true;
            }
        }
    }
    for i in dn_total..total {
        for j in 0..dn_total {
            mask[i * total + j] = true;
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn positive_offsets_stay_inside_box() {
        let cfg = DenoisingConfig { lambda1: 1.0, lambda2: 2.0, groups_per_image: 1 };
        let b = Box::new(0.5, 0.5, 0.4, 0.2);
        let mut r = rng(1);
        for _ in 0..2000 {
            let groups = sample_groups(&[b], &cfg, &mut r).unwrap();
            let p = groups[0][0];
            assert_eq!(p.polarity, Polarity::Positive);
            assert!((p.x - 0.5).abs() < 0.2, "x offset {}", p.x - 0.5);
            assert!((p.y - 0.5).abs() < 0.1, "y offset {}", p.y - 0.5);
            assert!(b.contains(p.x, p.y));
        }
    }

    #[test]
    fn negative_offsets_live_in_the_band() {
        let cfg = DenoisingConfig { lambda1: 1.0, lambda2: 2.0, groups_per_image: 1 };
        let b = Box::new(0.5, 0.5, 0.4, 0.4);
        let mut r = rng(2);
        for _ in 0..2000 {
            let groups = sample_groups(&[b], &cfg, &mut r).unwrap();
            let n = groups[0][1];
            assert_eq!(n.polarity, Polarity::Negative);
            let dx = (n.x - 0.5).abs();
            let dy = (n.y - 0.5).abs();
            assert!(dx > 0.2 && dx < 0.4, "dx {dx}");
            assert!(dy > 0.2 && dy < 0.4, "dy {dy}");
            assert!(!b.contains(n.x, n.y));
        }
    }

    #[test]
    fn equal_lambdas_fall_back_to_boundary() {
        let cfg = DenoisingConfig { lambda1: 1.0, lambda2: 1.0, groups_per_image: 1 };
        let b = Box::new(0.5, 0.5, 0.4, 0.2);
        let mut r = rng(3);
        let mut saw_left = false;
        let mut saw_right = false;
        for _ in 0..200 {
            let groups = sample_groups(&[b], &cfg, &mut r).unwrap();
            let n = groups[0][1];
            let dx = n.x - 0.5;
            let dy = n.y - 0.5;
            assert!((dx.abs() - 0.2).abs() < 1e-12, "dx {dx}");
            assert!((dy.abs() - 0.1).abs() < 1e-12, "dy {dy}");
            saw_left |= dx < 0.0;
            saw_right |= dx > 0.0;
        }
        assert!(saw_left && saw_right, "boundary sign must be random");
    }

    #[test]
    fn group_count_and_sizes() {
        let cfg = DenoisingConfig { lambda1: 1.0, lambda2: 2.0, groups_per_image: 3 };
        let boxes = [Box::new(0.3, 0.3, 0.2, 0.2), Box::new(0.7, 0.7, 0.2, 0.2)];
        let groups = sample_groups(&boxes, &cfg, &mut rng(4)).unwrap();
        assert_eq!(groups.len(), 3);
        for (gi, g) in groups.iter().enumerate() {
            assert_eq!(g.len(), 4, "one positive and one negative per box");
            assert!(g.iter().all(|p| p.group == gi));
        }
        let empty = sample_groups(&[], &cfg, &mut rng(4)).unwrap();
        assert!(empty.iter().all(|g| g.is_empty()));
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let cfg = DenoisingConfig::default();
        let boxes = [Box::new(0.4, 0.6, 0.3, 0.25)];
        let a = sample_groups(&boxes, &cfg, &mut rng(9)).unwrap();
        let b = sample_groups(&boxes, &cfg, &mut rng(9)).unwrap();
        for (ga, gb) in a.iter().zip(&b) {
            for (pa, pb) in ga.iter().zip(gb) {
                assert_eq!(pa.x, pb.x);
                assert_eq!(pa.y, pb.y);
            }
        }
    }

    #[test]
    fn invalid_lambdas_are_config_errors() {
        let mut r = rng(0);
        let b = [Box::new(0.5, 0.5, 0.2, 0.2)];
        let bad1 = DenoisingConfig { lambda1: 0.0, lambda2: 1.0, groups_per_image: 1 };
        assert!(matches!(sample_groups(&b, &bad1, &mut r), Err(Error::Config(_))));
        let bad2 = DenoisingConfig { lambda1: 2.0, lambda2: 1.0, groups_per_image: 1 };
        assert!(matches!(sample_groups(&b, &bad2, &mut r), Err(Error::Config(_))));
    }

    #[test]
    fn mask_empty_groups_blocks_nothing() {
        let mask = denoising_attention_mask(&[], 3, 4);
        assert_eq!(mask.len(), 49);
        assert!(mask.iter().all(|&b| !b));
    }

    #[test]
    fn mask_two_groups_of_two_block_count() {
        let (n_general, n_specific) = (3, 5);
        let mask = denoising_attention_mask(&[2, 2], n_general, n_specific);
        let total = 4 + n_general + n_specific;
        assert_eq!(mask.len(), total * total);
        let blocked = mask.iter().filter(|&&b| b).count();
        assert_eq!(blocked, 2 * (2 * 2) + (n_general + n_specific) * 4);
        // Cross-group blocking is symmetric.
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(mask[i * total + j], mask[j * total + i]);
            }
        }
        // Denoising rows may attend to matching queries, not vice versa.
        assert!(!mask[0 * total + 4]);
        assert!(mask[4 * total + 0]);
    }

    #[test]
    fn offset_means_are_centered() {
        let cfg = DenoisingConfig { lambda1: 1.0, lambda2: 2.0, groups_per_image: 1 };
        let b = Box::new(0.5, 0.5, 0.4, 0.4);
        let mut r = rng(21);
        let n = 10_000;
        let mut sum_pos = 0.0;
        let mut sum_neg = 0.0;
        for _ in 0..n {
            let groups = sample_groups(&[b], &cfg, &mut r).unwrap();
            sum_pos += groups[0][0].x - 0.5;
            sum_neg += groups[0][1].x - 0.5;
        }
        // Positive: uniform(-0.2, 0.2) has SE 0.2/sqrt(3n); negative is a
        // symmetric-sign band with E|m| in (0.2, 0.4), variance < 0.4^2.
        let se_pos = 0.2 / (3.0 * n as f64).sqrt();
        let se_neg = 0.4 / (n as f64).sqrt();
        assert!((sum_pos / n as f64).abs() < 3.0 * se_pos, "pos mean {}", sum_pos / n as f64);
        assert!((sum_neg / n as f64).abs() < 3.0 * se_neg, "neg mean {}", sum_neg / n as f64);
    }

    proptest! {
        #[test]
        fn prop_polarity_intervals_hold(
            seed in 0u64..1000,
            lambda1 in 0.2..1.0f64,
            extra in 0.0..1.0f64,
            cx in 0.3..0.7f64,
            cy in 0.3..0.7f64,
            w in 0.05..0.3f64,
            h in 0.05..0.3f64,
        ) {
            let lambda2 = lambda1 + extra;
            let cfg = DenoisingConfig { lambda1, lambda2, groups_per_image: 2 };
            let b = Box::new(cx, cy, w, h);
            let groups = sample_groups(&[b], &cfg, &mut rng(seed)).unwrap();
            for g in &groups {
                for p in g {
                    let dx = (p.x - cx).abs();
                    let dy = (p.y - cy).abs();
                    match p.polarity {
                        Polarity::Positive => {
                            prop_assert!(dx < lambda1 * w / 2.0);
                            prop_assert!(dy < lambda1 * h / 2.0);
                            prop_assert!(b.contains(p.x, p.y));
                        }
                        Polarity::Negative => {
                            if lambda1 == lambda2 {
                                prop_assert!((dx - lambda1 * w / 2.0).abs() < 1e-12);
                                prop_assert!((dy - lambda1 * h / 2.0).abs() < 1e-12);
                            } else {
                                prop_assert!(dx > lambda1 * w / 2.0 && dx < lambda2 * w / 2.0);
                                prop_assert!(dy > lambda1 * h / 2.0 && dy < lambda2 * h / 2.0);
                            }
                        }
                    }
                }
            }
        }

        #[test]
        fn prop_mask_dimensions(g1 in 0usize..5, g2 in 0usize..5, ng in 0usize..6, ns in 0usize..6) {
            let mask = denoising_attention_mask(&[g1, g2], ng, ns);
            let total = g1 + g2 + ng + ns;
            prop_assert_eq!(mask.len(), total * total);
            let blocked = mask.iter().filter(|&&b| b).count();
            prop_assert_eq!(blocked, 2 * g1 * g2 + (ng + ns) * (g1 + g2));
        }
    }
}
