//! Build a category table, sample a handful of scenes, and render one of
//! them into its feature pyramid.
//!
//!     cargo run --release --example generate_world -- [seed]

use owqf::world::{
    generate_scene, render_features, Bucket, CategoryTable, SceneGenConfig, WorldConfig,
};

fn main() -> owqf::Result<()> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(7);

    let wcfg = WorldConfig::default();
    let gen = SceneGenConfig { min_objects: 2, max_objects: 5, ..Default::default() };
    let table = CategoryTable::build(seed, wcfg.d_text, 2, 3, 4);

    println!("categories (seed {seed}):");
    for c in &table.categories {
        println!(
            "  #{:<2} {:12} {:?}  |e| = {:.3}",
            c.id,
            c.name,
            c.bucket,
            c.embedding.iter().map(|v| v * v).sum::<f64>().sqrt()
        );
    }
    for b in [Bucket::Rare, Bucket::Common, Bucket::Frequent] {
        println!("  {b:?} ids: {:?}", table.ids_in_bucket(b));
    }

    println!("\nscenes:");
    let mut scenes = Vec::new();
    for i in 0..4 {
        let scene = generate_scene(&table, &gen, i, seed * 100 + i)?;
        println!("  image {}: {} objects, labels {:?}", scene.image_id, scene.boxes.len(), scene.labels);
        scenes.push(scene);
    }

    // ASCII view of the first scene: each box is drawn with its label digit.
    let scene = &scenes[0];
    let (rows, cols) = (18usize, 36usize);
    let mut canvas = vec![b'.'; rows * cols];
    for (b, &label) in scene.boxes.iter().zip(&scene.labels) {
        let x0 = ((b.cx - b.w / 2.0) * cols as f64).floor().max(0.0) as usize;
        let x1 = (((b.cx + b.w / 2.0) * cols as f64).ceil() as usize).min(cols) - 1;
        let y0 = ((b.cy - b.h / 2.0) * rows as f64).floor().max(0.0) as usize;
        let y1 = (((b.cy + b.h / 2.0) * rows as f64).ceil() as usize).min(rows) - 1;
        let digit = b'0' + (label % 10) as u8;
        for x in x0..=x1 {
            canvas[y0 * cols + x] = digit;
            canvas[y1 * cols + x] = digit;
        }
        for y in y0..=y1 {
            canvas[y * cols + x0] = digit;
            canvas[y * cols + x1] = digit;
        }
    }
    println!("\nimage {} layout (digits are category ids mod 10):", scene.image_id);
    for y in 0..rows {
        println!("  {}", std::str::from_utf8(&canvas[y * cols..(y + 1) * cols]).unwrap());
    }

    let pyramid = render_features(scene, &table, &wcfg)?;
    println!("\nfeature pyramid:");
    for (li, level) in pyramid.levels.iter().enumerate() {
        let norms = level.norm_map();
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        let peak = norms.iter().cloned().fold(0.0, f64::max);
        println!(
            "  level {li}: {}x{}x{}  mean |f| {:.3}  peak |f| {:.3}",
            level.h, level.w, level.d, mean, peak
        );
    }
    Ok(())
}
