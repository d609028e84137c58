//! Train a small model end to end, then score it twice on the same held-out
//! images: once against a fixed category list (open-set), once letting the
//! decoder emit embeddings that are mapped back to names (open-ended).
//!
//!     cargo run --release --example dual_mode_eval

use owqf::config::EvalKnobs;
use owqf::eval::{evaluate, EvalMode, ModelDetector};
use owqf::model::{ModelConfig, OpenWorldModel};
use owqf::prompt::PromptConfig;
use owqf::train::{adapt, pretrain, TrainConfig, TrainWorld};
use owqf::world::{CategoryTable, SceneGenConfig, WorldConfig};

fn main() -> owqf::Result<()> {
    let wcfg = WorldConfig {
        d_text: 16,
        feature_dim: 32,
        levels: 3,
        base_resolution: 16,
        ..Default::default()
    };
    let mcfg = ModelConfig {
        d: 32,
        heads: 4,
        n_layers: 2,
        n_queries: 64,
        n_specific: 24,
        feature_dim: 32,
        d_text: 16,
        ..Default::default()
    };
    let tcfg = TrainConfig {
        pretrain_steps: 600,
        adapt_steps: 300,
        batch_size: 4,
        ..Default::default()
    };
    // A perfect prompter keeps the two modes comparable.
    let pcfg = PromptConfig { fidelity: 1.0, label_noise: 0.0, ..Default::default() };

    let table = CategoryTable::build(7, wcfg.d_text, 2, 4, 6);
    let gen = SceneGenConfig::default();
    let train_w = TrainWorld::build(table.clone(), &wcfg, &gen, &pcfg, 400, 7)?;
    let eval_w = TrainWorld::build(table, &wcfg, &gen, &pcfg, 120, 7001)?;

    let mut model = OpenWorldModel::new(mcfg)?;
    println!("pretraining {} steps...", tcfg.pretrain_steps);
    pretrain(&mut model, &train_w, &tcfg)?;
    println!("adapting {} steps (core frozen, fusion path training)...", tcfg.adapt_steps);
    adapt(&mut model, &train_w, &tcfg)?;

    let knobs = EvalKnobs::default();
    let detector = ModelDetector::new(&model, &eval_w, &knobs);
    let all: Vec<usize> = (0..eval_w.table.len()).collect();

    let open_set = evaluate(&detector, &eval_w, EvalMode::OpenSet, &all, &knobs)?;
    let open_ended = evaluate(&detector, &eval_w, EvalMode::OpenEnded, &[], &knobs)?;

    println!("\n           |  open-set  | open-ended");
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "  -  ".into());
    println!("  AP       |   {:.4}   |   {:.4}", open_set.ap, open_ended.ap);
    println!("  AP rare  |   {}   |   {}", cell(open_set.ap_r), cell(open_ended.ap_r));
    println!("  AP common|   {}   |   {}", cell(open_set.ap_c), cell(open_ended.ap_c));
    println!("  AP freq  |   {}   |   {}", cell(open_set.ap_f), cell(open_ended.ap_f));

    println!("\nper-category (open-set):");
    for row in &open_set.per_category {
        println!(
            "  #{:<2} {:?}  gt {:>3}  ap {}",
            row.category,
            row.bucket,
            row.gt_count,
            cell(row.ap)
        );
    }
    Ok(())
}
