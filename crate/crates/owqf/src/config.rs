//! Run configuration: one JSON object of flat dotted keys.
//!
//! Every tunable in the pipeline has exactly one key; unknown keys are
//! rejected so typos fail loudly instead of silently running defaults. The
//! `OWQF_SEED` environment variable overrides the seed key. Saved configs
//! are sorted maps, so rewriting one is byte-stable.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::prompt::PromptConfig;
use crate::train::TrainConfig;
use crate::world::{CategoryTable, SceneGenConfig, WorldConfig};

/// Detection/report knobs used by evaluation.
#[derive(Debug, Clone)]
pub struct EvalKnobs {
    /// Keep at most this many detections per category when scoring.
    pub per_class_cap: usize,
    pub score_threshold: f64,
    pub max_detections: usize,
    /// Same-label duplicate suppression threshold at inference; 1.0 disables.
    pub nms_iou: f64,
}

impl Default for EvalKnobs {
    fn default() -> Self {
        EvalKnobs {
            per_class_cap: 1000,
            score_threshold: 0.05,
            max_detections: 100,
            nms_iou: 0.7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub n_images: usize,
    pub n_rare: usize,
    pub n_common: usize,
    pub n_frequent: usize,
    /// Emit a checkpoint every this many adaptation steps (the final state
    /// is always written).
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    pub world: WorldConfig,
    pub gen: SceneGenConfig,
    pub prompt: PromptConfig,
    pub train: TrainConfig,
    pub eval: EvalKnobs,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "out".into(),
            n_images: 100,
            n_rare: 2,
            n_common: 3,
            n_frequent: 3,
            checkpoint_every: 1000,
            model: ModelConfig::default(),
            world: WorldConfig::default(),
            gen: SceneGenConfig::default(),
            prompt: PromptConfig::default(),
            train: TrainConfig::default(),
            eval: EvalKnobs::default(),
        }
    }
}

fn want_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Config(format!("key {key} expects a number, got {v}")))
}

fn want_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|u| u as usize)
        .ok_or_else(|| Error::Config(format!("key {key} expects a non-negative integer, got {v}")))
}

fn want_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| Error::Config(format!("key {key} expects a non-negative integer, got {v}")))
}

fn want_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| Error::Config(format!("key {key} expects true or false, got {v}")))
}

fn want_str(key: &str, v: &Value) -> Result<String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Config(format!("key {key} expects a string, got {v}")))
}

impl RunConfig {
    /// Apply one flat key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "seed" => self.seed = want_u64(key, v)?,
            "out_dir" => self.out_dir = want_str(key, v)?,

            "data.n_images" => self.n_images = want_usize(key, v)?,
            "data.min_objects" => self.gen.min_objects = want_usize(key, v)?,
            "data.max_objects" => self.gen.max_objects = want_usize(key, v)?,
            "data.max_pairwise_iou" => self.gen.max_pairwise_iou = want_f64(key, v)?,

            "categories.rare" => self.n_rare = want_usize(key, v)?,
            "categories.common" => self.n_common = want_usize(key, v)?,
            "categories.frequent" => self.n_frequent = want_usize(key, v)?,

            "world.levels" => self.world.levels = want_usize(key, v)?,
            "world.base_resolution" => self.world.base_resolution = want_usize(key, v)?,
            "world.feature_dim" => self.world.feature_dim = want_usize(key, v)?,
            "world.d_text" => self.world.d_text = want_usize(key, v)?,
            "world.noise_sigma" => self.world.noise_sigma = want_f64(key, v)?,
            "world.bump_amplitude" => self.world.bump_amplitude = want_f64(key, v)?,

            "decoder.dim" => self.model.d = want_usize(key, v)?,
            "decoder.heads" => self.model.heads = want_usize(key, v)?,
            "decoder.layers" => self.model.n_layers = want_usize(key, v)?,
            "decoder.aux_loss" => self.model.aux_loss = want_bool(key, v)?,

            "queries.n_learnable" => self.model.n_queries = want_usize(key, v)?,
            "queries.n_specific" => self.model.n_specific = want_usize(key, v)?,
            "general_query.add_point_feature" => {
                self.model.add_point_feature = want_bool(key, v)?
            }

            "dn.lambda1" => self.model.dn.lambda1 = want_f64(key, v)?,
            "dn.lambda2" => self.model.dn.lambda2 = want_f64(key, v)?,
            "dn.groups" => self.model.dn.groups_per_image = want_usize(key, v)?,
            // `dn.enabled` and the ablation row toggle name the same switch.
            "dn.enabled" | "toggles.denoising_points" => {
                self.model.toggles.denoising = want_bool(key, v)?
            }
            "toggles.gs_fusion" => self.model.toggles.general = want_bool(key, v)?,
            "toggles.ranked_queries" => self.model.toggles.ranked = want_bool(key, v)?,

            "loss.w_class" => self.model.loss.w_class = want_f64(key, v)?,
            "loss.w_l1" => self.model.loss.w_l1 = want_f64(key, v)?,
            "loss.w_giou" => self.model.loss.w_giou = want_f64(key, v)?,
            "loss.dn_weight" => self.model.dn_weight = want_f64(key, v)?,

            "prompt.fidelity" => self.prompt.fidelity = want_f64(key, v)?,
            "prompt.label_noise" => self.prompt.label_noise = want_f64(key, v)?,
            "prompt.threshold" => self.prompt.threshold = want_f64(key, v)?,
            "prompt.max_points" => self.prompt.max_points = want_usize(key, v)?,
            "prompt.layers" => self.prompt.layers = want_usize(key, v)?,
            "prompt.heads" => self.prompt.heads = want_usize(key, v)?,
            "prompt.map_size" => self.prompt.map_size = want_usize(key, v)?,
            "prompt.nms_radius" => self.prompt.nms_radius = want_f64(key, v)?,

            "train.steps" => self.train.pretrain_steps = want_usize(key, v)?,
            "train.adapt_steps" => self.train.adapt_steps = want_usize(key, v)?,
            "train.batch" => self.train.batch_size = want_usize(key, v)?,
            // `train.lr` sets both stages; `train.lr_adapt` then narrows the
            // second stage (keys apply in sorted order, so this works from a
            // file regardless of how it was written).
            "train.lr" => {
                let lr = want_f64(key, v)?;
                self.train.lr_pretrain = lr;
                self.train.lr_adapt = lr;
            }
            "train.lr_adapt" => self.train.lr_adapt = want_f64(key, v)?,
            "train.divergence_threshold" => {
                self.train.divergence_threshold = want_f64(key, v)?
            }
            "train.checkpoint_every" => self.checkpoint_every = want_usize(key, v)?,

            "eval.per_class_cap" => self.eval.per_class_cap = want_usize(key, v)?,
            "eval.score_threshold" => self.eval.score_threshold = want_f64(key, v)?,
            "eval.max_detections" => self.eval.max_detections = want_usize(key, v)?,
            "eval.nms_iou" => self.eval.nms_iou = want_f64(key, v)?,

            _ => {
                return Err(Error::Config(format!(
                    "unknown config key {key:?} (check for a typo)"
                )))
            }
        }
        Ok(())
    }

    /// Fields with one source of truth: model widths follow the world
    /// section, and the master seed feeds both the model and the renderer.
    fn sync(&mut self) {
        self.model.feature_dim = self.world.feature_dim;
        self.model.d_text = self.world.d_text;
        self.model.seed = self.seed;
        self.world.world_seed = self.seed;
    }

    pub fn from_flat(map: &BTreeMap<String, Value>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        cfg.sync();
        cfg.validate()?;
        Ok(cfg)
    }

    /// The canonical flat form: every exposed key, sorted.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.into());
        put("out_dir", self.out_dir.clone().into());
        put("data.n_images", self.n_images.into());
        put("data.min_objects", self.gen.min_objects.into());
        put("data.max_objects", self.gen.max_objects.into());
        put("data.max_pairwise_iou", self.gen.max_pairwise_iou.into());
        put("categories.rare", self.n_rare.into());
        put("categories.common", self.n_common.into());
        put("categories.frequent", self.n_frequent.into());
        put("world.levels", self.world.levels.into());
        put("world.base_resolution", self.world.base_resolution.into());
        put("world.feature_dim", self.world.feature_dim.into());
        put("world.d_text", self.world.d_text.into());
        put("world.noise_sigma", self.world.noise_sigma.into());
        put("world.bump_amplitude", self.world.bump_amplitude.into());
        put("decoder.dim", self.model.d.into());
        put("decoder.heads", self.model.heads.into());
        put("decoder.layers", self.model.n_layers.into());
        put("decoder.aux_loss", self.model.aux_loss.into());
        put("queries.n_learnable", self.model.n_queries.into());
        put("queries.n_specific", self.model.n_specific.into());
        put(
            "general_query.add_point_feature",
            self.model.add_point_feature.into(),
        );
        put("dn.lambda1", self.model.dn.lambda1.into());
        put("dn.lambda2", self.model.dn.lambda2.into());
        put("dn.groups", self.model.dn.groups_per_image.into());
        put("dn.enabled", self.model.toggles.denoising.into());
        put("toggles.gs_fusion", self.model.toggles.general.into());
        put("toggles.ranked_queries", self.model.toggles.ranked.into());
        put("loss.w_class", self.model.loss.w_class.into());
        put("loss.w_l1", self.model.loss.w_l1.into());
        put("loss.w_giou", self.model.loss.w_giou.into());
        put("loss.dn_weight", self.model.dn_weight.into());
        put("prompt.fidelity", self.prompt.fidelity.into());
        put("prompt.label_noise", self.prompt.label_noise.into());
        put("prompt.threshold", self.prompt.threshold.into());
        put("prompt.max_points", self.prompt.max_points.into());
        put("prompt.layers", self.prompt.layers.into());
        put("prompt.heads", self.prompt.heads.into());
        put("prompt.map_size", self.prompt.map_size.into());
        put("prompt.nms_radius", self.prompt.nms_radius.into());
        put("train.steps", self.train.pretrain_steps.into());
        put("train.adapt_steps", self.train.adapt_steps.into());
        put("train.batch", self.train.batch_size.into());
        put("train.lr", self.train.lr_pretrain.into());
        put("train.lr_adapt", self.train.lr_adapt.into());
        put(
            "train.divergence_threshold",
            self.train.divergence_threshold.into(),
        );
        put("train.checkpoint_every", self.checkpoint_every.into());
        put("eval.per_class_cap", self.eval.per_class_cap.into());
        put("eval.score_threshold", self.eval.score_threshold.into());
        put("eval.max_detections", self.eval.max_detections.into());
        put("eval.nms_iou", self.eval.nms_iou.into());
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.gen.validate()?;
        self.model.validate()?;
        self.prompt.validate()?;
        self.train.validate()?;
        if self.n_images == 0 {
            return Err(Error::Config("data.n_images must be positive".into()));
        }
        if self.n_categories() < 2 {
            return Err(Error::Config(
                "at least two categories are required (label noise needs an alternative)".into(),
            ));
        }
        if self.eval.per_class_cap == 0 || self.eval.max_detections == 0 {
            return Err(Error::Config(
                "eval caps must be positive".into(),
            ));
        }
        if !(self.eval.score_threshold >= 0.0 && self.eval.score_threshold < 1.0) {
            return Err(Error::Config(format!(
                "eval.score_threshold must be in [0, 1), got {}",
                self.eval.score_threshold
            )));
        }
        if !(self.eval.nms_iou > 0.0 && self.eval.nms_iou <= 1.0) {
            return Err(Error::Config(format!(
                "eval.nms_iou must be in (0, 1], got {}",
                self.eval.nms_iou
            )));
        }
        if self.model.feature_dim != self.world.feature_dim
            || self.model.d_text != self.world.d_text
        {
            return Err(Error::Config(
                "model widths out of sync with the world (set world.feature_dim / world.d_text)"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn n_categories(&self) -> usize {
        self.n_rare + self.n_common + self.n_frequent
    }

    /// The category table this run trains and evaluates against.
    pub fn category_table(&self) -> CategoryTable {
        CategoryTable::build(
            self.seed ^ 0xc0de_5eed_0000_0001,
            self.world.d_text,
            self.n_rare,
            self.n_common,
            self.n_frequent,
        )
    }

    /// Parse a JSON object of flat keys, then apply the `OWQF_SEED`
    /// environment override if present.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        let obj = doc.as_object().ok_or_else(|| {
            Error::Config(format!(
                "{} must contain a single JSON object of flat keys",
                path.display()
            ))
        })?;
        let map: BTreeMap<String, Value> =
            obj.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let mut cfg = Self::from_flat(&map)?;
        cfg.apply_env_seed(std::env::var("OWQF_SEED").ok().as_deref())?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_flat())
            .map_err(|e| Error::json("run config", e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Set the master seed, propagating it to the model and the renderer.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sync();
    }

    /// Override the seed from an environment value (`None` = unset).
    pub fn apply_env_seed(&mut self, env: Option<&str>) -> Result<()> {
        if let Some(raw) = env {
            self.seed = raw.trim().parse::<u64>().map_err(|_| {
                Error::Config(format!(
                    "OWQF_SEED must be a non-negative integer, got {raw:?}"
                ))
            })?;
            self.sync();
        }
        Ok(())
    }
}
