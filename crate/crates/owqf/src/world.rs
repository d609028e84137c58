//! Synthetic scenes and multi-scale features with a known generative story.
//!
//! A dataset is defined by a category table (identities drawn from rare /
//! common / frequent buckets, each with a fixed random unit text embedding)
//! and a stream of scenes. Rendering drops a localized bump of the object's
//! projected category embedding into every pyramid level at the object
//! center, on top of Gaussian background noise, so point features at centers
//! are linearly separable by category while remaining noisy enough that
//! detection is not a lookup.
//!
//! Everything is keyed by explicit seeds: the same (seed, config) pair
//! always reproduces the same table, scenes, and features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Rare,
    Common,
    Frequent,
}

impl Bucket {
    pub fn index(self) -> usize {
        match self {
            Bucket::Rare => 0,
            Bucket::Common => 1,
            Bucket::Frequent => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Category {
    pub id: usize,
    pub name: String,
    pub bucket: Bucket,
    pub embedding_seed: u64,
    /// Unit-norm text embedding, derived from `embedding_seed`.
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CategoryTable {
    pub d_text: usize,
    pub categories: Vec<Category>,
}

fn unit_embedding(seed: u64, d_text: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut v: Vec<f64> = (0..d_text).map(|_| normal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

impl CategoryTable {
    /// Build a table with the given bucket sizes. Embedding seeds are
    /// derived from `seed` so the table is reproducible from its JSON form.
    pub fn build(seed: u64, d_text: usize, n_rare: usize, n_common: usize, n_frequent: usize) -> Self {
        let mut categories = Vec::new();
        let buckets = [
            (Bucket::Rare, "rare", n_rare),
            (Bucket::Common, "common", n_common),
            (Bucket::Frequent, "frequent", n_frequent),
        ];
        let mut id = 0;
        for (bucket, tag, count) in buckets {
            for k in 0..count {
                let embedding_seed = seed
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add(id as u64 + 1);
                categories.push(Category {
                    id,
                    name: format!("{tag}_{k:02}"),
                    bucket,
                    embedding_seed,
                    embedding: unit_embedding(embedding_seed, d_text),
                });
                id += 1;
            }
        }
        CategoryTable { d_text, categories }
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn ids_in_bucket(&self, bucket: Bucket) -> Vec<usize> {
        self.categories
            .iter()
            .filter(|c| c.bucket == bucket)
            .map(|c| c.id)
            .collect()
    }

    pub fn embedding(&self, id: usize) -> Result<&[f64]> {
        self.categories
            .get(id)
            .map(|c| c.embedding.as_slice())
            .ok_or_else(|| Error::Consistency(format!("unknown category id {id}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub image_id: u64,
    pub seed: u64,
    pub boxes: Vec<Box>,
    pub labels: Vec<usize>,
}

/// World-level knobs shared by generation and rendering.
#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub world_seed: u64,
    pub d_text: usize,
    /// Feature width of rendered pyramid levels.
    pub feature_dim: usize,
    pub levels: usize,
    /// Finest level is `base_resolution` x `base_resolution`; each coarser
    /// level halves it.
    pub base_resolution: usize,
    pub noise_sigma: f64,
    pub bump_amplitude: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            world_seed: 0,
            d_text: 32,
            feature_dim: 64,
            levels: 3,
            base_resolution: 32,
            noise_sigma: 0.1,
            bump_amplitude: 2.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!(
                "world.levels must be >= 2, got {}",
                self.levels
            )));
        }
        if self.base_resolution >> (self.levels - 1) < 2 {
            return Err(Error::Config(format!(
                "world.base_resolution {} too small for {} levels (coarsest side must be >= 2)",
                self.base_resolution, self.levels
            )));
        }
        if self.feature_dim == 0 || self.d_text == 0 {
            return Err(Error::Config("feature and text widths must be positive".into()));
        }
        Ok(())
    }

    /// Fixed random projection from text space into feature space, derived
    /// from the world seed. Columns are scaled so projected unit embeddings
    /// keep roughly unit norm.
    pub fn text_to_feature(&self) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.world_seed ^ 0x517c_c1b7_2722_0a95);
        let normal = Normal::new(0.0, (1.0 / self.d_text as f64).sqrt()).expect("normal");
        (0..self.feature_dim * self.d_text)
            .map(|_| normal.sample(&mut rng))
            .collect()
    }
}

/// Scene sampling knobs: object count range, bucket mix, per-bucket size
/// ranges (rare objects render small, frequent ones large).
#[derive(Debug, Clone)]
pub struct SceneGenConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Draw probabilities for (rare, common, frequent); must sum to 1.
    pub mix: [f64; 3],
    pub size_ranges: [(f64, f64); 3],
    pub max_pairwise_iou: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            min_objects: 0,
            max_objects: 6,
            mix: [0.1, 0.3, 0.6],
            size_ranges: [(0.04, 0.09), (0.08, 0.20), (0.12, 0.30)],
            max_pairwise_iou: 0.3,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "data.min_objects {} > data.max_objects {}",
                self.min_objects, self.max_objects
            )));
        }
        let sum: f64 = self.mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.mix.iter().any(|&p| p < 0.0) {
            return Err(Error::Config(format!(
                "bucket mix must be a distribution, got {:?}",
                self.mix
            )));
        }
        Ok(())
    }
}

/// Deterministic scene draw. Objects whose box cannot be placed with
/// bounded overlap after 50 tries are dropped, so pairwise IoU stays under
/// the configured cap.
pub fn generate_scene(
    table: &CategoryTable,
    cfg: &SceneGenConfig,
    image_id: u64,
    seed: u64,
) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut boxes: Vec<Box> = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let buckets = [Bucket::Rare, Bucket::Common, Bucket::Frequent];
    for _ in 0..n {
        let u: f64 = rng.random_range(0.0..1.0);
        let bucket = if u < cfg.mix[0] {
            buckets[0]
        } else if u < cfg.mix[0] + cfg.mix[1] {
            buckets[1]
        } else {
            buckets[2]
        };
        let pool = table.ids_in_bucket(bucket);
        if pool.is_empty() {
            return Err(Error::Config(format!(
                "category table has no {bucket:?} categories but the mix draws them"
            )));
        }
        let label = pool[rng.random_range(0..pool.len())];
        let (lo, hi) = cfg.size_ranges[bucket.index()];
        let mut placed = None;
        for _ in 0..50 {
            let w = rng.random_range(lo..hi);
            let h = rng.random_range(lo..hi);
            let cx = rng.random_range(w / 2.0 + 0.01..1.0 - w / 2.0 - 0.01);
            let cy = rng.random_range(h / 2.0 + 0.01..1.0 - h / 2.0 - 0.01);
            let cand = Box::new(cx, cy, w, h);
            if boxes
                .iter()
                .all(|b| crate::geometry::iou(b, &cand) <= cfg.max_pairwise_iou)
            {
                placed = Some(cand);
                break;
            }
        }
        if let Some(b) = placed {
            boxes.push(b);
            labels.push(label);
        }
    }
    Ok(Scene {
        image_id,
        seed,
        boxes,
        labels,
    })
}

/// One pyramid level: row-major `[h][w][feature_dim]`.
#[derive(Debug, Clone)]
pub struct Level {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Level {
    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        &self.data[(i * self.w + j) * self.d..(i * self.w + j + 1) * self.d]
    }

    /// Border-clamped bilinear sample at normalized coordinates.
    /// Cell (i, j) is centered at ((j + 0.5) / w, (i + 0.5) / h).
    pub fn bilinear(&self, x: f64, y: f64) -> Vec<f64> {
        let fx = (x * self.w as f64 - 0.5).clamp(0.0, (self.w - 1) as f64);
        let fy = (y * self.h as f64 - 0.5).clamp(0.0, (self.h - 1) as f64);
        let j0 = fx.floor() as usize;
        let i0 = fy.floor() as usize;
        let j1 = (j0 + 1).min(self.w - 1);
        let i1 = (i0 + 1).min(self.h - 1);
        let tx = fx - j0 as f64;
        let ty = fy - i0 as f64;
        let mut out = vec![0.0; self.d];
        let corners = [
            (i0, j0, (1.0 - ty) * (1.0 - tx)),
            (i0, j1, (1.0 - ty) * tx),
            (i1, j0, ty * (1.0 - tx)),
            (i1, j1, ty * tx),
        ];
        for (i, j, wgt) in corners {
            if wgt == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.at(i, j)) {
                *o += wgt * v;
            }
        }
        out
    }

    /// Euclidean norm of the feature vector at each cell.
    pub fn norm_map(&self) -> Vec<f64> {
        (0..self.h * self.w)
            .map(|c| {
                self.data[c * self.d..(c + 1) * self.d]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Level>,
}

impl FeaturePyramid {
    pub fn feature_dim(&self) -> usize {
        self.levels.first().map(|l| l.d).unwrap_or(0)
    }

    pub fn total_cells(&self) -> usize {
        self.levels.iter().map(|l| l.h * l.w).sum()
    }
}

/// Render the scene's feature pyramid: Gaussian background noise plus, for
/// every object, a localized bump of its projected category embedding at the
/// object center in every level. The bump amplitude dominates the noise so
/// center energy exceeds the background mean by at least three sigma.
pub fn render_features(scene: &Scene, table: &CategoryTable, wcfg: &WorldConfig) -> Result<FeaturePyramid> {
    wcfg.validate()?;
    if wcfg.d_text != table.d_text {
        return Err(Error::Consistency(format!(
            "world d_text {} != category table d_text {}",
            wcfg.d_text, table.d_text
        )));
    }
    let d = wcfg.feature_dim;
    let proj = wcfg.text_to_feature();
    let noise = Normal::new(0.0, wcfg.noise_sigma)
        .map_err(|e| Error::Numeric(format!("noise sigma: {e}")))?;

    // Project each label's embedding once, normalized to unit feature norm.
    let mut bump_dirs: Vec<Option<Vec<f64>>> = vec![None; table.len()];
    for &label in &scene.labels {
        if label >= table.len() {
            return Err(Error::Consistency(format!(
                "scene {} references unknown category {label}",
                scene.image_id
            )));
        }
        if bump_dirs[label].is_none() {
            let e = &table.categories[label].embedding;
            let mut v = vec![0.0; d];
            for r in 0..d {
                for c in 0..wcfg.d_text {
                    v[r] += proj[r * wcfg.d_text + c] * e[c];
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
            bump_dirs[label] = Some(v);
        }
    }

    let mut levels = Vec::with_capacity(wcfg.levels);
    for l in 0..wcfg.levels {
        let side = wcfg.base_resolution >> l;
        let (h, w) = (side, side);
        let mut rng = ChaCha8Rng::seed_from_u64(
            scene
                .seed
                .wrapping_mul(0x2545_f491_4f6c_dd1d)
                .wrapping_add(l as u64),
        );
        let mut data: Vec<f64> = (0..h * w * d).map(|_| noise.sample(&mut rng)).collect();

        for (b, &label) in scene.boxes.iter().zip(&scene.labels) {
            let dir = bump_dirs[label].as_ref().expect("bump projected above");
            let fx = b.cx * w as f64 - 0.5;
            let fy = b.cy * h as f64 - 0.5;
            // Spatial spread proportional to box size, floored so the bump
            // survives at coarse levels.
            let sx = (b.w * w as f64 / 4.0).max(0.6);
            let sy = (b.h * h as f64 / 4.0).max(0.6);
            let ri = 3.0 * sy.max(1.0);
            let rj = 3.0 * sx.max(1.0);
            let i_lo = ((fy - ri).floor().max(0.0)) as usize;
            let i_hi = ((fy + ri).ceil() as usize).min(h - 1);
            let j_lo = ((fx - rj).floor().max(0.0)) as usize;
            let j_hi = ((fx + rj).ceil() as usize).min(w - 1);
            for i in i_lo..=i_hi {
                for j in j_lo..=j_hi {
                    let dy = (i as f64 - fy) / sy;
                    let dx = (j as f64 - fx) / sx;
                    let falloff = (-0.5 * (dx * dx + dy * dy)).exp();
                    if falloff < 1e-4 {
                        continue;
                    }
                    let a = wcfg.bump_amplitude * falloff;
                    let cell = &mut data[(i * w + j) * d..(i * w + j + 1) * d];
                    for (c, v) in cell.iter_mut().zip(dir) {
                        *c += a * v;
                    }
                }
            }
        }
        levels.push(Level { h, w, d, data });
    }
    Ok(FeaturePyramid { levels })
}

// ---- persistence -----------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct CategoryRecord {
    id: usize,
    name: String,
    bucket: Bucket,
    embedding_seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableFile {
    schema: u32,
    d_text: usize,
    categories: Vec<CategoryRecord>,
}

pub fn save_category_table(table: &CategoryTable, path: &std::path::Path) -> Result<()> {
    let file = TableFile {
        schema: 1,
        d_text: table.d_text,
        categories: table
            .categories
            .iter()
            .map(|c| CategoryRecord {
                id: c.id,
                name: c.name.clone(),
                bucket: c.bucket,
                embedding_seed: c.embedding_seed,
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::json("category table", e))?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_category_table(path: &std::path::Path) -> Result<CategoryTable> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: TableFile =
        serde_json::from_str(&text).map_err(|e| Error::json("category table", e))?;
    if file.schema != 1 {
        return Err(Error::Config(format!(
            "unsupported category table schema {}",
            file.schema
        )));
    }
    let mut categories = Vec::with_capacity(file.categories.len());
    for (i, r) in file.categories.into_iter().enumerate() {
        if r.id != i {
            return Err(Error::Consistency(format!(
                "category ids must be dense and ordered; found id {} at position {i}",
                r.id
            )));
        }
        categories.push(Category {
            id: r.id,
            name: r.name,
            bucket: r.bucket,
            embedding_seed: r.embedding_seed,
            embedding: unit_embedding(r.embedding_seed, file.d_text),
        });
    }
    Ok(CategoryTable {
        d_text: file.d_text,
        categories,
    })
}

/// One scene per line: `{image_id, seed, boxes, labels}`.
pub fn save_scenes(scenes: &[Scene], path: &std::path::Path) -> Result<()> {
    let mut out = String::new();
    for s in scenes {
        out.push_str(&serde_json::to_string(s).map_err(|e| Error::json("scene", e))?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_scenes(path: &std::path::Path, table: &CategoryTable) -> Result<Vec<Scene>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut scenes = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: Scene = serde_json::from_str(line)
            .map_err(|e| Error::json(format!("{}:{}", path.display(), ln + 1), e))?;
        if s.boxes.len() != s.labels.len() {
            return Err(Error::Consistency(format!(
                "scene {}: {} boxes but {} labels",
                s.image_id,
                s.boxes.len(),
                s.labels.len()
            )));
        }
        if let Some(&bad) = s.labels.iter().find(|&&l| l >= table.len()) {
            return Err(Error::Consistency(format!(
                "scene {}: label {bad} outside category table of size {}",
                s.image_id,
                table.len()
            )));
        }
        scenes.push(s);
    }
    Ok(scenes)
}
