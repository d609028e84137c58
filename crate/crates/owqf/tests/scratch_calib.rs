// Temporary calibration probe; not part of the suite.

use owqf::config::RunConfig;
use owqf::eval::{evaluate, EvalMode, ModelDetector};
use owqf::model::{ModelConfig, OpenWorldModel, PathToggles};
use owqf::prompt::PromptConfig;
use owqf::train::{adapt, pretrain, TrainConfig, TrainWorld};
use owqf::world::WorldConfig;

const EVAL_SALT: u64 = 0x9d8f_c305_7b4e_a211;

fn desk_cfg(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        n_images: 2000,
        n_rare: 2,
        n_common: 4,
        n_frequent: 6,
        world: WorldConfig {
            d_text: 16,
            feature_dim: 32,
            levels: 3,
            base_resolution: 16,
            ..Default::default()
        },
        model: ModelConfig {
            d: 32,
            heads: 4,
            n_layers: 2,
            n_queries: 64,
            n_specific: 24,
            feature_dim: 32,
            d_text: 16,
            ..Default::default()
        },
        prompt: PromptConfig { fidelity: 0.9, ..Default::default() },
        train: TrainConfig {
            pretrain_steps: std::env::var("PRE").map(|v| v.parse().unwrap()).unwrap_or(400),
            adapt_steps: std::env::var("ADA").map(|v| v.parse().unwrap()).unwrap_or(250),
            batch_size: 4,
            lr_pretrain: std::env::var("LRP").map(|v| v.parse().unwrap()).unwrap_or(1e-3),
            lr_adapt: std::env::var("LRA").map(|v| v.parse().unwrap()).unwrap_or(1e-3),
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.set_seed(seed);
    cfg
}

#[test]
#[ignore]
fn calib() {
    let seed: u64 = std::env::var("SEED").map(|v| v.parse().unwrap()).unwrap_or(7);
    let cfg = desk_cfg(seed);
    eprintln!(
        "[calib] pre {} ada {} lr {:?}",
        cfg.train.pretrain_steps,
        cfg.train.adapt_steps,
        (cfg.train.lr_pretrain, cfg.train.lr_adapt)
    );
    let table = cfg.category_table();
    let t0 = std::time::Instant::now();
    let train_w =
        TrainWorld::build(table.clone(), &cfg.world, &cfg.gen, &cfg.prompt, 2000, seed).unwrap();
    let eval_w =
        TrainWorld::build(table, &cfg.world, &cfg.gen, &cfg.prompt, 500, seed ^ EVAL_SALT).unwrap();
    eprintln!("[calib] worlds built in {:.1}s", t0.elapsed().as_secs_f64());

    let mut base = OpenWorldModel::new(cfg.model.clone()).unwrap();
    let t0 = std::time::Instant::now();
    let out = pretrain(&mut base, &train_w, &cfg.train).unwrap();
    eprintln!(
        "[calib] pretrain {:.1}s, loss {:.4} -> {:.4}",
        t0.elapsed().as_secs_f64(),
        out.curve.first().unwrap(),
        out.final_loss
    );
    let all: Vec<usize> = (0..train_w.table.len()).collect();
    {
        let det = ModelDetector::new(&base, &eval_w, &cfg.eval);
        let rep = evaluate(&det, &eval_w, EvalMode::OpenSet, &all, &cfg.eval).unwrap();
        eprintln!(
            "[calib] post-pretrain: ap {:.4} ap_r {:?} ap_c {:?} ap_f {:?}",
            rep.ap, rep.ap_r, rep.ap_c, rep.ap_f
        );
    }

    for (name, toggles) in [
        ("full", PathToggles { general: true, ranked: true, denoising: true }),
        ("base", PathToggles { general: false, ranked: false, denoising: false }),
    ] {
        let mut m = base.clone();
        m.cfg.toggles = toggles;
        let t0 = std::time::Instant::now();
        let out = adapt(&mut m, &train_w, &cfg.train).unwrap();
        let head: f64 = out.curve.iter().take(50).sum::<f64>() / 50.0;
        let tail: f64 =
            out.curve.iter().rev().take(50).sum::<f64>() / 50.0;
        let det = ModelDetector::new(&m, &eval_w, &cfg.eval);
        let rep = evaluate(&det, &eval_w, EvalMode::OpenSet, &all, &cfg.eval).unwrap();
        let rep_oe = evaluate(&det, &eval_w, EvalMode::OpenEnded, &[], &cfg.eval).unwrap();
        eprintln!(
            "[calib] {name}: adapt {:.1}s loss mean(first50) {head:.4} -> mean(last50) {tail:.4} | open-set ap {:.4} ap_r {:?} | open-ended ap {:.4}",
            t0.elapsed().as_secs_f64(),
            rep.ap,
            rep.ap_r,
            rep_oe.ap
        );
        for nms in [1.0, 0.7, 0.5, 0.4, 0.3] {
            let mut knobs = cfg.eval.clone();
            knobs.nms_iou = nms;
            let det = ModelDetector::new(&m, &eval_w, &knobs);
            let rep = evaluate(&det, &eval_w, EvalMode::OpenSet, &all, &knobs).unwrap();
            eprintln!(
                "[calib]   {name} nms {nms:.1}: ap {:.4} ap_r {:?} ap_c {:?} ap_f {:?}",
                rep.ap, rep.ap_r, rep.ap_c, rep.ap_f
            );
        }
        if name == "full" {
            // Criterion-8 preview: perfect prompter on the held-out split.
            let pcfg = PromptConfig { fidelity: 1.0, label_noise: 0.0, ..Default::default() };
            let eval_perfect = TrainWorld::build(
                cfg.category_table(),
                &cfg.world,
                &cfg.gen,
                &pcfg,
                500,
                seed ^ EVAL_SALT,
            )
            .unwrap();
            let det = ModelDetector::new(&m, &eval_perfect, &cfg.eval);
            let os = evaluate(&det, &eval_perfect, EvalMode::OpenSet, &all, &cfg.eval).unwrap();
            let oe = evaluate(&det, &eval_perfect, EvalMode::OpenEnded, &[], &cfg.eval).unwrap();
            eprintln!(
                "[calib] full @ fidelity 1.0: open-set ap {:.4}, open-ended ap {:.4}, ratio {:.3}",
                os.ap,
                oe.ap,
                oe.ap / os.ap
            );
        }
    }
}
