//! Sample denoising point groups around a ground-truth box and plot where
//! they land: positives stay strictly inside, negatives ring the border.
//!
//!     cargo run --release --example denoising_points -- [lambda1] [lambda2]

use owqf::denoise::{sample_groups, DenoisingConfig, Polarity};
use owqf::geometry::Box;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> owqf::Result<()> {
    let mut args = std::env::args().skip(1);
    let lambda1: f64 = args.next().map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let lambda2: f64 = args.next().map(|s| s.parse().unwrap()).unwrap_or(2.0);

    let b = Box::new(0.5, 0.5, 0.4, 0.3);
    let cfg = DenoisingConfig { lambda1, lambda2, groups_per_image: 4 };
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let (rows, cols) = (25usize, 50usize);
    let mut canvas = vec![b' '; rows * cols];
    // Box outline.
    let gx = |x: f64| ((x * cols as f64) as usize).min(cols - 1);
    let gy = |y: f64| ((y * rows as f64) as usize).min(rows - 1);
    let (x0, x1) = (gx(b.cx - b.w / 2.0), gx(b.cx + b.w / 2.0));
    let (y0, y1) = (gy(b.cy - b.h / 2.0), gy(b.cy + b.h / 2.0));
    for x in x0..=x1 {
        canvas[y0 * cols + x] = b'-';
        canvas[y1 * cols + x] = b'-';
    }
    for y in y0..=y1 {
        canvas[y * cols + x0] = b'|';
        canvas[y * cols + x1] = b'|';
    }

    let mut n_pos = 0usize;
    let mut n_neg = 0usize;
    let mut neg_outside = 0usize;
    for _ in 0..60 {
        for group in sample_groups(&[b], &cfg, &mut rng)? {
            for p in group {
                let cell = &mut canvas[gy(p.y) * cols + gx(p.x)];
                match p.polarity {
                    Polarity::Positive => {
                        *cell = b'+';
                        n_pos += 1;
                        assert!(b.contains(p.x, p.y), "positive escaped the box");
                    }
                    Polarity::Negative => {
                        *cell = b'o';
                        n_neg += 1;
                        if !b.contains(p.x, p.y) {
                            neg_outside += 1;
                        }
                    }
                }
            }
        }
    }

    println!("box (cx {}, cy {}, w {}, h {}), lambda1 {lambda1}, lambda2 {lambda2}", b.cx, b.cy, b.w, b.h);
    println!("{n_pos} positives (+, always inside), {n_neg} negatives (o, {neg_outside} strictly outside)");
    if lambda1 == lambda2 {
        println!("lambda1 == lambda2: the negative band is empty, negatives sit on the boundary");
    }
    println!();
    for y in 0..rows {
        println!("  {}", std::str::from_utf8(&canvas[y * cols..(y + 1) * cols]).unwrap());
    }

    // Per-group leak masking: show the self-attention mask layout for two
    // groups of this size next to 3 matched + 2 ranked slots.
    let group_sizes = [4usize, 4];
    let mask = owqf::denoise::denoising_attention_mask(&group_sizes, 2, 3);
    let q = group_sizes.iter().sum::<usize>() + 2 + 3;
    println!("\nself-attention mask (x = blocked), {q} queries = 4 dn | 4 dn | 2 general | 3 specific:");
    for i in 0..q {
        let row: String = (0..q).map(|j| if mask[i * q + j] { 'x' } else { '.' }).collect();
        println!("  {row}");
    }
    Ok(())
}
