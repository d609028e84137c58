//! The four pipeline commands behind the CLI: generate, train, eval, ablate.
//!
//! Every command is a pure function of (config, seed): artifacts land under
//! the configured output directory and rerunning produces identical bytes.
//! Training happens on the config's dataset; evaluation always runs on a
//! held-out split derived from the master seed, so reported numbers measure
//! generalization, and an ablation row is bit-identical to a standalone
//! train+eval run with the same toggles.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    collect_detections, save_predictions, score_detections, Detection, EvalMode, EvalReport,
    ModelDetector,
};
use crate::model::{OpenWorldModel, PathToggles};
use crate::prompt::load_prompt_file;
use crate::train::{adapt, adapt_with, pretrain, pretrain_with, StageOutcome, TrainWorld};
use crate::world::{load_category_table, save_category_table, save_scenes, CategoryTable};

/// Scene draws for the held-out evaluation split come from a fixed twist of
/// the master seed, so train and eval scenes never coincide.
const EVAL_SEED_SALT: u64 = 0x9d8f_c305_7b4e_a211;

fn ensure_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    Ok(dir)
}

/// The dataset a run trains on.
pub fn build_train_world(cfg: &RunConfig) -> Result<TrainWorld> {
    TrainWorld::build(
        cfg.category_table(),
        &cfg.world,
        &cfg.gen,
        &cfg.prompt,
        cfg.n_images,
        cfg.seed,
    )
}

/// The held-out split every evaluation runs on: same categories, same
/// rendering physics, freshly drawn scenes and prompts.
pub fn build_eval_world(cfg: &RunConfig) -> Result<TrainWorld> {
    TrainWorld::build(
        cfg.category_table(),
        &cfg.world,
        &cfg.gen,
        &cfg.prompt,
        cfg.n_images,
        cfg.seed ^ EVAL_SEED_SALT,
    )
}

pub struct GenerateArtifacts {
    pub scenes_path: PathBuf,
    pub table_path: PathBuf,
    pub n_scenes: usize,
    pub n_categories: usize,
}

/// Write the training dataset: scenes as JSON lines plus the category table.
pub fn cmd_generate(cfg: &RunConfig) -> Result<GenerateArtifacts> {
    cfg.validate()?;
    let out = ensure_out_dir(cfg)?;
    let world = build_train_world(cfg)?;
    let scenes_path = out.join("scenes.jsonl");
    let table_path = out.join("categories.json");
    save_scenes(&world.scenes, &scenes_path)?;
    save_category_table(&world.table, &table_path)?;
    Ok(GenerateArtifacts {
        scenes_path,
        table_path,
        n_scenes: world.scenes.len(),
        n_categories: world.table.len(),
    })
}

#[derive(Serialize, Deserialize)]
pub struct LossCurves {
    pub schema: u32,
    pub pretrain: Vec<f64>,
    pub adapt: Vec<f64>,
}

pub struct TrainArtifacts {
    pub model: OpenWorldModel,
    pub pretrain: StageOutcome,
    pub adapt: StageOutcome,
    pub checkpoint_path: PathBuf,
    pub curves_path: PathBuf,
}

/// Two-stage training. Periodic checkpoints land every
/// `train.checkpoint_every` steps (counted across both stages); the final
/// state is always `checkpoint.json`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let out = ensure_out_dir(cfg)?;
    let world = build_train_world(cfg)?;
    let mut model = OpenWorldModel::new(cfg.model.clone())?;

    let every = cfg.checkpoint_every;
    let periodic = |global: usize, model: &OpenWorldModel| -> Result<()> {
        if every > 0 && (global + 1) % every == 0 {
            model.save(&out.join(format!("checkpoint_step{:06}.json", global + 1)))?;
        }
        Ok(())
    };
    let pre = pretrain_with(&mut model, &world, &cfg.train, |s, _, m| periodic(s, m))?;
    let off = cfg.train.pretrain_steps;
    let ad = adapt_with(&mut model, &world, &cfg.train, |s, _, m| periodic(off + s, m))?;

    let checkpoint_path = out.join("checkpoint.json");
    model.save(&checkpoint_path)?;
    let curves = LossCurves {
        schema: 1,
        pretrain: pre.curve.clone(),
        adapt: ad.curve.clone(),
    };
    let curves_path = out.join("loss_curves.json");
    let text =
        serde_json::to_string_pretty(&curves).map_err(|e| Error::json("loss curves", e))?;
    std::fs::write(&curves_path, text + "\n")
        .map_err(|e| Error::io(curves_path.display().to_string(), e))?;
    Ok(TrainArtifacts {
        model,
        pretrain: pre,
        adapt: ad,
        checkpoint_path,
        curves_path,
    })
}

/// Parse a category list file: a JSON array of ids or names, resolved
/// against the run's table. Order is preserved, duplicates collapse.
pub fn load_category_list(path: &Path, table: &CategoryTable) -> Result<Vec<usize>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let arr = doc.as_array().ok_or_else(|| {
        Error::Config(format!("{} must be a JSON array of category ids or names", path.display()))
    })?;
    let mut seen = std::collections::BTreeSet::new();
    let mut ids = Vec::new();
    for item in arr {
        let id = if let Some(n) = item.as_u64() {
            let id = n as usize;
            if id >= table.len() {
                return Err(Error::Config(format!(
                    "category id {id} outside the {}-category table",
                    table.len()
                )));
            }
            id
        } else if let Some(name) = item.as_str() {
            table
                .categories
                .iter()
                .find(|c| c.name == name)
                .map(|c| c.id)
                .ok_or_else(|| Error::Config(format!("unknown category name {name:?}")))?
        } else {
            return Err(Error::Config(format!(
                "category list entries must be ids or names, got {item}"
            )));
        };
        if seen.insert(id) {
            ids.push(id);
        }
    }
    Ok(ids)
}

pub struct EvalArtifacts {
    pub report: EvalReport,
    pub detections: Vec<Detection>,
    pub report_path: PathBuf,
    pub predictions_path: PathBuf,
    pub warnings: Vec<String>,
}

/// Evaluate a checkpoint on the held-out split in the requested mode,
/// writing the report and the raw predictions.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    mode: EvalMode,
    list_path: Option<&Path>,
    prompts_path: Option<&Path>,
) -> Result<EvalArtifacts> {
    cfg.validate()?;
    let out = ensure_out_dir(cfg)?;
    let model = OpenWorldModel::load(checkpoint)?;
    if model.cfg.feature_dim != cfg.world.feature_dim || model.cfg.d_text != cfg.world.d_text {
        return Err(Error::Consistency(
            "checkpoint widths do not match the configured world".into(),
        ));
    }
    let mut world = build_eval_world(cfg)?;
    let mut warnings = Vec::new();

    if let Some(p) = prompts_path {
        let user = load_prompt_file(p)?;
        let mut applied = 0usize;
        for (i, scene) in world.scenes.iter().enumerate() {
            if let Some(pts) = user.get(&scene.image_id) {
                world.prompts[i] = pts.clone();
                applied += 1;
            }
        }
        if applied < user.len() {
            warnings.push(format!(
                "{} prompt file entr{} matched no evaluation image",
                user.len() - applied,
                if user.len() - applied == 1 { "y" } else { "ies" }
            ));
        }
    }

    let list: Vec<usize> = match mode {
        EvalMode::OpenSet => {
            let path = list_path.ok_or_else(|| {
                Error::Config(
                    "open-set evaluation requires a category list; \
                     run open-ended mode to use discovered labels only"
                        .into(),
                )
            })?;
            let ids = load_category_list(path, &world.table)?;
            if ids.is_empty() {
                return Err(Error::Config(
                    "the category list is empty; run open-ended mode instead".into(),
                ));
            }
            ids
        }
        EvalMode::OpenEnded => {
            if list_path.is_some() {
                warnings.push("open-ended mode ignores the category list".into());
            }
            Vec::new()
        }
    };

    let detector = ModelDetector::new(&model, &world, &cfg.eval);
    let detections = collect_detections(&detector, &world, mode, &list)?;
    let report = score_detections(&detections, &world, mode, &cfg.eval)?;

    let report_path = out.join(format!("report_{}.json", mode.as_str()));
    let predictions_path = out.join(format!("predictions_{}.json", mode.as_str()));
    report.save(&report_path)?;
    save_predictions(&predictions_path, &detections)?;
    Ok(EvalArtifacts {
        report,
        detections,
        report_path,
        predictions_path,
        warnings,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub gs_fusion: bool,
    pub ranked_queries: bool,
    pub denoising_points: bool,
    pub ap: f64,
    pub ap_r: Option<f64>,
    pub ap_c: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub schema: u32,
    pub rows: Vec<AblationRow>,
}

pub struct AblateArtifacts {
    pub table: AblationTable,
    pub table_path: PathBuf,
}

/// Train and score the four component rows under shared seeds: the
/// baseline's pretraining is reused for every row (stage one never touches
/// the ablated paths), then each row adapts its own copy.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblateArtifacts> {
    cfg.validate()?;
    let out = ensure_out_dir(cfg)?;
    let train_world = build_train_world(cfg)?;
    let eval_world = build_eval_world(cfg)?;

    let mut base = OpenWorldModel::new(cfg.model.clone())?;
    pretrain(&mut base, &train_world, &cfg.train)?;

    let specs: [(&str, bool, bool, bool); 4] = [
        ("baseline", false, false, false),
        ("+fusion", true, false, false),
        ("+fusion+ranked", true, true, false),
        ("+fusion+ranked+denoising", true, true, true),
    ];
    let full_list: Vec<usize> = (0..eval_world.table.len()).collect();
    let mut rows = Vec::with_capacity(specs.len());
    for (name, general, ranked, denoising) in specs {
        let mut model = base.clone();
        model.cfg.toggles = PathToggles { general, ranked, denoising };
        adapt(&mut model, &train_world, &cfg.train)?;
        let detector = ModelDetector::new(&model, &eval_world, &cfg.eval);
        let report = crate::eval::evaluate(
            &detector,
            &eval_world,
            EvalMode::OpenSet,
            &full_list,
            &cfg.eval,
        )?;
        rows.push(AblationRow {
            name: name.to_string(),
            gs_fusion: general,
            ranked_queries: ranked,
            denoising_points: denoising,
            ap: report.ap,
            ap_r: report.ap_r,
            ap_c: report.ap_c,
        });
    }
    let table = AblationTable { schema: 1, rows };
    let table_path = out.join("ablation.json");
    let text =
        serde_json::to_string_pretty(&table).map_err(|e| Error::json("ablation table", e))?;
    std::fs::write(&table_path, text + "\n")
        .map_err(|e| Error::io(table_path.display().to_string(), e))?;
    Ok(AblateArtifacts { table, table_path })
}

/// Reload helper for inspection flows: the generated dataset as written.
pub fn load_generated(out_dir: &Path) -> Result<(CategoryTable, Vec<crate::world::Scene>)> {
    let table = load_category_table(&out_dir.join("categories.json"))?;
    let scenes = crate::world::load_scenes(&out_dir.join("scenes.jsonl"), &table)?;
    Ok((table, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    /// A config small enough that train/eval/ablate finish in seconds.
    fn tiny_cfg(dir: &Path) -> RunConfig {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: serde_json::Value| {
            m.insert(k.to_string(), v);
        };
        put("seed", 5u64.into());
        put("out_dir", dir.display().to_string().into());
        put("data.n_images", 4u64.into());
        put("data.min_objects", 1u64.into());
        put("data.max_objects", 2u64.into());
        put("categories.rare", 1u64.into());
        put("categories.common", 2u64.into());
        put("categories.frequent", 2u64.into());
        put("world.levels", 2u64.into());
        put("world.base_resolution", 8u64.into());
        put("world.feature_dim", 10u64.into());
        put("world.d_text", 8u64.into());
        put("decoder.dim", 16u64.into());
        put("decoder.heads", 2u64.into());
        put("decoder.layers", 1u64.into());
        put("queries.n_learnable", 12u64.into());
        put("queries.n_specific", 6u64.into());
        put("prompt.fidelity", 1.0.into());
        put("prompt.label_noise", 0.0.into());
        put("train.steps", 6u64.into());
        put("train.adapt_steps", 4u64.into());
        put("train.batch", 2u64.into());
        put("train.checkpoint_every", 0u64.into());
        RunConfig::from_flat(&m).unwrap()
    }

    #[test]
    fn generate_is_idempotent_and_seed_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        let a = cmd_generate(&cfg).unwrap();
        assert_eq!(a.n_scenes, 4);
        assert_eq!(a.n_categories, 5);
        let bytes1 = std::fs::read(&a.scenes_path).unwrap();
        cmd_generate(&cfg).unwrap();
        let bytes2 = std::fs::read(&a.scenes_path).unwrap();
        assert_eq!(bytes1, bytes2, "regeneration changed the dataset");

        let (table, scenes) = load_generated(dir.path()).unwrap();
        assert_eq!(scenes.len(), 4);
        assert_eq!(table.len(), 5);
        for s in &scenes {
            assert!((1..=2).contains(&s.boxes.len()));
        }

        cfg.set_seed(6);
        cmd_generate(&cfg).unwrap();
        let bytes3 = std::fs::read(&a.scenes_path).unwrap();
        assert_ne!(bytes1, bytes3, "new seed must draw new scenes");
    }

    #[test]
    fn train_then_eval_produces_stable_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let trained = cmd_train(&cfg).unwrap();
        assert_eq!(trained.pretrain.curve.len(), 6);
        assert_eq!(trained.adapt.curve.len(), 4);
        assert!(trained.checkpoint_path.exists());
        assert!(trained.curves_path.exists());

        let list_path = dir.path().join("list.json");
        std::fs::write(&list_path, "[0, 1, 2, 3, 4]").unwrap();
        let e1 = cmd_eval(
            &cfg,
            &trained.checkpoint_path,
            EvalMode::OpenSet,
            Some(&list_path),
            None,
        )
        .unwrap();
        let r1 = std::fs::read(&e1.report_path).unwrap();
        let p1 = std::fs::read(&e1.predictions_path).unwrap();
        let e2 = cmd_eval(
            &cfg,
            &trained.checkpoint_path,
            EvalMode::OpenSet,
            Some(&list_path),
            None,
        )
        .unwrap();
        assert_eq!(r1, std::fs::read(&e2.report_path).unwrap());
        assert_eq!(p1, std::fs::read(&e2.predictions_path).unwrap());
        assert_eq!(e1.report.mode, "open-set");

        // Open-set without a list is a usage error; with a list file but an
        // empty array it is too.
        assert!(matches!(
            cmd_eval(&cfg, &trained.checkpoint_path, EvalMode::OpenSet, None, None),
            Err(Error::Config(_))
        ));
        std::fs::write(&list_path, "[]").unwrap();
        assert!(matches!(
            cmd_eval(&cfg, &trained.checkpoint_path, EvalMode::OpenSet, Some(&list_path), None),
            Err(Error::Config(_))
        ));

        // Open-ended ignores the list with a warning.
        std::fs::write(&list_path, "[0]").unwrap();
        let e3 = cmd_eval(
            &cfg,
            &trained.checkpoint_path,
            EvalMode::OpenEnded,
            Some(&list_path),
            None,
        )
        .unwrap();
        assert_eq!(e3.report.mode, "open-ended");
        assert!(e3.warnings.iter().any(|w| w.contains("ignores")));
    }

    #[test]
    fn user_prompt_files_replace_simulated_points() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let trained = cmd_train(&cfg).unwrap();
        let prompts_path = dir.path().join("points.json");
        // One strong point per evaluation image at a fixed location.
        let entries: Vec<serde_json::Value> = (0..4u64)
            .map(|id| {
                serde_json::json!({
                    "image_id": id,
                    "points": [{"x": 0.5, "y": 0.5, "score": 1.0, "label": 0}]
                })
            })
            .collect();
        std::fs::write(&prompts_path, serde_json::to_string(&entries).unwrap()).unwrap();
        let with = cmd_eval(
            &cfg,
            &trained.checkpoint_path,
            EvalMode::OpenEnded,
            None,
            Some(&prompts_path),
        )
        .unwrap();
        assert!(with.warnings.is_empty());
        // Every image now discovers exactly category 0, so no detection can
        // carry any other label.
        assert!(with.detections.iter().all(|d| d.label == 0));
    }

    #[test]
    fn ablation_rows_are_monotone_and_row_one_matches_a_plain_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let ablate = cmd_ablate(&cfg).unwrap();
        assert_eq!(ablate.table.rows.len(), 4);
        let toggles: Vec<(bool, bool, bool)> = ablate
            .table
            .rows
            .iter()
            .map(|r| (r.gs_fusion, r.ranked_queries, r.denoising_points))
            .collect();
        assert_eq!(
            toggles,
            vec![
                (false, false, false),
                (true, false, false),
                (true, true, false),
                (true, true, true)
            ]
        );
        assert!(ablate.table_path.exists());

        // A standalone run with the baseline toggles must reproduce row 1
        // bit for bit.
        let dir2 = tempfile::tempdir().unwrap();
        let mut cfg2 = tiny_cfg(dir2.path());
        cfg2.model.toggles = PathToggles { general: false, ranked: false, denoising: false };
        let trained = cmd_train(&cfg2).unwrap();
        let full_list = dir2.path().join("list.json");
        std::fs::write(&full_list, "[0, 1, 2, 3, 4]").unwrap();
        let e = cmd_eval(
            &cfg2,
            &trained.checkpoint_path,
            EvalMode::OpenSet,
            Some(&full_list),
            None,
        )
        .unwrap();
        let row = &ablate.table.rows[0];
        assert_eq!(row.ap.to_bits(), e.report.ap.to_bits());
        assert_eq!(
            row.ap_r.map(f64::to_bits),
            e.report.ap_r.map(f64::to_bits)
        );
        assert_eq!(
            row.ap_c.map(f64::to_bits),
            e.report.ap_c.map(f64::to_bits)
        );
    }
}
