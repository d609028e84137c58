//! Walk one fused decode by hand: build the query partition (denoising |
//! general | specific), run the layer stack, and trace how each layer's
//! box update tightens onto the image content.
//!
//!     cargo run --release --example query_fusion_decode

use owqf::decoder::{decode, DecodeInputs, DecoderStack, Partition};
use owqf::denoise::denoising_attention_mask;
use owqf::geometry;
use owqf::nn::{Frame, ParamStore};
use owqf::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> owqf::Result<()> {
    let d = 16usize;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let stack = DecoderStack::init(&mut store, &mut rng, "decoder", d, 2, 3)?;
    // Fresh stacks keep their box heads at zero so layer zero is a no-op;
    // nudge them off zero to make the per-layer refinement visible.
    for name in store.names().map(str::to_string).collect::<Vec<_>>() {
        if name.contains("box_head") && name.ends_with(".lin2.w") {
            let id = store.id_of(&name).unwrap();
            let data: Vec<f64> =
                store.data(id).iter().map(|_| rng.random_range(-0.35..0.35)).collect();
            store.set_data(id, data)?;
        }
    }

    let partition = Partition { n_dn: 4, n_general: 3, n_specific: 5 };
    let q = partition.n_dn + partition.n_general + partition.n_specific;
    let mask = denoising_attention_mask(&[2, 2], partition.n_general, partition.n_specific);

    let mut tape = Tape::new();
    let mut frame = Frame::new();
    let rnd = |tape: &mut Tape, rng: &mut ChaCha8Rng, shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
        tape.value(shape, data)
    };
    let content = rnd(&mut tape, &mut rng, vec![q, d])?;
    let seeds: Vec<f64> = (0..q)
        .flat_map(|i| {
            let b = geometry::Box::new(
                0.2 + 0.6 * (i as f64 / q as f64),
                0.5,
                0.2,
                0.2,
            );
            b.logits()
        })
        .collect();
    let box_logits = tape.value(vec![q, 4], seeds)?;
    let text = rnd(&mut tape, &mut rng, vec![6, d])?;
    let image = rnd(&mut tape, &mut rng, vec![24, d])?;
    let image_pos = rnd(&mut tape, &mut rng, vec![24, d])?;

    let traces = decode(
        &mut tape,
        &mut frame,
        &store,
        &stack,
        &DecodeInputs {
            content,
            box_logits,
            text_feats: text,
            image_feats: image,
            image_pos,
            self_mask: Some(&mask),
            partition,
        },
    )?;

    println!(
        "{q} queries = {} denoising (two leak-masked groups) | {} general | {} specific",
        partition.n_dn, partition.n_general, partition.n_specific
    );
    println!("tape holds {} nodes after {} layers\n", tape.len(), traces.len());

    let start = tape.data(box_logits).to_vec();
    let mut prev = start.clone();
    for (li, tr) in traces.iter().enumerate() {
        let cur = tape.data(tr.box_logits).to_vec();
        let step: f64 = prev
            .iter()
            .zip(&cur)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / cur.len() as f64;
        let total: f64 = start
            .iter()
            .zip(&cur)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / cur.len() as f64;
        println!("layer {li}: mean |logit delta| this layer {step:.4}, cumulative {total:.4}");
        prev = cur;
    }

    // Decode the final layer's first few boxes back into geometry.
    let last = traces.last().unwrap();
    let logits = tape.data(last.box_logits);
    println!("\nfinal boxes (first 4 queries):");
    for i in 0..4 {
        let b = geometry::Box::from_logits(&logits[i * 4..i * 4 + 4]);
        println!("  q{i}: cx {:.3} cy {:.3} w {:.3} h {:.3}", b.cx, b.cy, b.w, b.h);
    }

    // The box heads are partitioned: denoising+general rows flow through one
    // head, specific rows through the other. Show they are separate weights.
    let freeze = stack.freeze_mask();
    println!("\nadaptation-trainable parameter groups in this stack: {}", freeze.len());
    Ok(())
}
