//! Sweep the prompt simulator's fidelity and watch the point quality
//! degrade: hits keep their label, mislabels swap it, spurious points land
//! on background.
//!
//!     cargo run --release --example prompt_pipeline

use owqf::prompt::{simulate_prompts, PromptConfig};
use owqf::world::{generate_scene, CategoryTable, SceneGenConfig, WorldConfig};

fn main() -> owqf::Result<()> {
    let wcfg = WorldConfig::default();
    let table = CategoryTable::build(5, wcfg.d_text, 2, 3, 4);
    let gen = SceneGenConfig { min_objects: 3, max_objects: 6, ..Default::default() };

    println!("fidelity | prompts | on-object same-label | on-object wrong-label | background");
    for &fidelity in &[1.0, 0.9, 0.7, 0.5] {
        let pcfg = PromptConfig {
            fidelity,
            label_noise: (1.0 - fidelity) / 2.0,
            ..Default::default()
        };
        let (mut total, mut hit, mut mislabeled, mut background) = (0usize, 0usize, 0usize, 0usize);
        for image in 0..40u64 {
            let scene = generate_scene(&table, &gen, image, 900 + image)?;
            let prompts = simulate_prompts(&scene, &table, &pcfg, 50 + image)?;
            for p in &prompts {
                total += 1;
                // Boxes may overlap, so credit the prompt if any box under
                // it carries the proposed label.
                let owners: Vec<usize> = scene
                    .boxes
                    .iter()
                    .zip(&scene.labels)
                    .filter(|(b, _)| b.contains(p.x, p.y))
                    .map(|(_, &l)| l)
                    .collect();
                if owners.is_empty() {
                    background += 1;
                } else if owners.contains(&p.proposed_label) {
                    hit += 1;
                } else {
                    mislabeled += 1;
                }
            }
        }
        println!(
            "   {fidelity:.1}   |  {total:4}   |        {:5.1}%        |        {:5.1}%         |   {:5.1}%",
            100.0 * hit as f64 / total as f64,
            100.0 * mislabeled as f64 / total as f64,
            100.0 * background as f64 / total as f64,
        );
    }

    // One scene in detail at the reference setting.
    let pcfg = PromptConfig { fidelity: 0.9, ..Default::default() };
    let scene = generate_scene(&table, &gen, 0, 900)?;
    let prompts = simulate_prompts(&scene, &table, &pcfg, 50)?;
    println!("\nimage 0 ground truth:");
    for (b, l) in scene.boxes.iter().zip(&scene.labels) {
        println!("  label {l} at ({:.2}, {:.2}) size {:.2}x{:.2}", b.cx, b.cy, b.w, b.h);
    }
    println!("prompt points (score = simulator confidence):");
    for p in &prompts {
        println!(
            "  label {:<2} at ({:.2}, {:.2}) score {:.2}",
            p.proposed_label, p.x, p.y, p.score
        );
    }
    Ok(())
}
