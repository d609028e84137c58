//! Single-image inference: train briefly, point the detector at one scene,
//! and overlay its predictions on the ground truth.
//!
//!     cargo run --release --example detect_scene

use owqf::model::{DetectConfig, ModelConfig, OpenWorldModel, QuerySource};
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
        pretrain_steps: 500,
        adapt_steps: 250,
        batch_size: 4,
        ..Default::default()
    };
    let pcfg = PromptConfig { fidelity: 1.0, label_noise: 0.0, ..Default::default() };

    let table = CategoryTable::build(7, wcfg.d_text, 2, 4, 6);
    let gen = SceneGenConfig { min_objects: 2, max_objects: 4, ..Default::default() };
    let world = TrainWorld::build(table, &wcfg, &gen, &pcfg, 300, 7)?;

    let mut model = OpenWorldModel::new(mcfg)?;
    println!("training ({} + {} steps)...", tcfg.pretrain_steps, tcfg.adapt_steps);
    pretrain(&mut model, &world, &tcfg)?;
    adapt(&mut model, &world, &tcfg)?;

    // Detect on a training image, prompted by its simulated points.
    let idx = 3usize;
    let scene = &world.scenes[idx];
    let vocab: Vec<Vec<f64>> = (0..world.table.len())
        .map(|c| world.table.embedding(c).map(<[f64]>::to_vec))
        .collect::<owqf::Result<_>>()?;
    let dets = model.detect(
        &world.pyramids[idx],
        &vocab,
        &world.prompts[idx],
        &DetectConfig { score_threshold: 0.2, max_detections: 10, ..Default::default() },
    )?;

    println!("\nground truth (image {}):", scene.image_id);
    for (b, l) in scene.boxes.iter().zip(&scene.labels) {
        println!("  label {l} at ({:.2}, {:.2}) {:.2}x{:.2}", b.cx, b.cy, b.w, b.h);
    }
    println!("\ndetections over 0.2:");
    for d in &dets {
        let src = match d.source {
            QuerySource::General => "general ",
            QuerySource::Specific => "specific",
        };
        println!(
            "  label {} at ({:.2}, {:.2}) {:.2}x{:.2}  score {:.2}  [{src}]",
            d.label, d.box_.cx, d.box_.cy, d.box_.w, d.box_.h, d.score
        );
    }

    // Overlay: ground truth drawn with digits, detections with letters.
    let (rows, cols) = (20usize, 40usize);
    let mut canvas = vec![b'.'; rows * cols];
    let draw = |b: &owqf::geometry::Box, glyph: u8, canvas: &mut Vec<u8>| {
        let gx = |x: f64| ((x.clamp(0.0, 1.0) * cols as f64) as usize).min(cols - 1);
        let gy = |y: f64| ((y.clamp(0.0, 1.0) * rows as f64) as usize).min(rows - 1);
        let (x0, x1) = (gx(b.cx - b.w / 2.0), gx(b.cx + b.w / 2.0));
        let (y0, y1) = (gy(b.cy - b.h / 2.0), gy(b.cy + b.h / 2.0));
        for x in x0..=x1 {
            canvas[y0 * cols + x] = glyph;
            canvas[y1 * cols + x] = glyph;
        }
        for y in y0..=y1 {
            canvas[y * cols + x0] = glyph;
            canvas[y * cols + x1] = glyph;
        }
    };
    for (b, &l) in scene.boxes.iter().zip(&scene.labels) {
        draw(b, b'0' + (l % 10) as u8, &mut canvas);
    }
    for d in &dets {
        draw(&d.box_, b'a' + (d.label % 26) as u8, &mut canvas);
    }
    println!("\noverlay (digits = truth by category, letters = detections by category):");
    for y in 0..rows {
        println!("  {}", std::str::from_utf8(&canvas[y * cols..(y + 1) * cols]).unwrap());
    }
    Ok(())
}
