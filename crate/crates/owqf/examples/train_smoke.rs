//! The smoke-budget run: 50 pretraining steps at decoder width 32 on one
//! core, expected to finish in well under a minute.
//!
//!     cargo run --release --example train_smoke

use std::time::Instant;

use owqf::model::{ModelConfig, OpenWorldModel};
use owqf::prompt::PromptConfig;
use owqf::train::{pretrain, TrainConfig, TrainWorld};
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
        pretrain_steps: 50,
        adapt_steps: 0,
        batch_size: 4,
        ..Default::default()
    };

    let t0 = Instant::now();
    let table = CategoryTable::build(7, wcfg.d_text, 2, 4, 6);
    let world = TrainWorld::build(
        table,
        &wcfg,
        &SceneGenConfig::default(),
        &PromptConfig::default(),
        200,
        7,
    )?;
    println!("world: 200 images, {} categories, built in {:.2}s", world.table.len(), t0.elapsed().as_secs_f64());

    let mut model = OpenWorldModel::new(mcfg)?;
    let n_params: usize = {
        let mut total = 0;
        for name in model.store.names().map(str::to_string).collect::<Vec<_>>() {
            let id = model.store.id_of(&name).unwrap();
            total += model.store.data(id).len();
        }
        total
    };
    println!("model: d=32, 2 layers, {n_params} scalar parameters");

    let t1 = Instant::now();
    let outcome = pretrain(&mut model, &world, &tcfg)?;
    let dt = t1.elapsed().as_secs_f64();

    println!("\n50-step loss curve (every 5th step):");
    for (i, loss) in outcome.curve.iter().enumerate().step_by(5) {
        let bar = "#".repeat(((loss / outcome.curve[0]).min(1.0) * 40.0) as usize);
        println!("  step {i:>3}  {loss:>10.3}  {bar}");
    }
    println!(
        "\nfinal loss {:.3} (from {:.3}); components: class {:.3}, l1 {:.3}, giou {:.3}",
        outcome.final_loss,
        outcome.curve[0],
        outcome.last_report.grounding_class,
        outcome.last_report.grounding_l1,
        outcome.last_report.grounding_giou,
    );
    println!("trained in {dt:.1}s (budget: 60s on one core)");
    assert!(dt < 60.0, "smoke run must stay inside the budget");
    Ok(())
}
