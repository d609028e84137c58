//! Exercise the tape: build a small attention-flavored expression by hand,
//! backprop it, and compare every gradient against central differences.
//!
//!     cargo run --release --example autodiff_gradcheck

use owqf::tensor::{grad_check, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> owqf::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rnd = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    };

    // A hand-rolled attention head: softmax(Q K^T) V through a layer norm,
    // reduced to a scalar. Three trainable inputs.
    let q = rnd(&mut rng, 4 * 6);
    let k = rnd(&mut rng, 5 * 6);
    let v = rnd(&mut rng, 5 * 6);
    let report = grad_check(
        &[(vec![4, 6], q), (vec![5, 6], k), (vec![5, 6], v)],
        |t, p| {
            let kt = t.transpose(p[1])?;
            let scores = t.matmul(p[0], kt)?;
            let scaled = t.scale(scores, 1.0 / (6.0f64).sqrt());
            let attn = t.softmax(scaled, 1)?;
            let mixed = t.matmul(attn, p[2])?;
            let gain = t.value(vec![6], vec![1.0; 6])?;
            let bias = t.value(vec![6], vec![0.0; 6])?;
            let normed = t.layer_norm(mixed, gain, bias, 1e-5)?;
            let act = t.sigmoid(normed);
            t.mean_all(act)
        },
    )?;

    println!("attention-expression gradient check");
    println!("  max relative error : {:.3e}", report.max_rel_err);
    println!("  worst parameter    : #{} coord {}", report.worst_param, report.worst_coord);
    println!("  analytic vs numeric: {:.12} vs {:.12}", report.analytic, report.numeric);
    assert!(report.max_rel_err < 1e-4);

    // The same machinery drives the whole model: forward passes write onto
    // the tape, backward fills cotangents, and any scalar output can be
    // checked numerically. Show one more with a kinked op for contrast.
    let x: Vec<f64> = (0..12)
        .map(|_| {
            let m = rng.random_range(0.3..1.2);
            if rng.random_range(0..2) == 0 {
                m
            } else {
                -m
            }
        })
        .collect();
    let report = grad_check(&[(vec![3, 4], x)], |t, p| {
        let r = t.relu(p[0]);
        let a = t.abs(p[0]);
        let s = t.add(r, a)?;
        t.mean_all(s)
    })?;
    println!("\nrelu+abs (inputs kept off the kink)");
    println!("  max relative error : {:.3e}", report.max_rel_err);
    assert!(report.max_rel_err < 1e-4);

    // Tapes are plain values: `param` marks leaves for gradients, `value`
    // makes constants that backward skips.
    let mut t = Tape::new();
    let a = t.param(vec![4, 6], vec![0.1; 24])?;
    let b = t.value(vec![6, 4], vec![0.2; 24])?;
    let c = t.matmul(a, b)?;
    let loss = t.sum_all(c);
    t.backward(loss)?;
    println!("\ntiny graph: {} nodes, d(loss)/d(a)[0] = {:.3}", t.len(), t.grad(a).unwrap()[0]);
    assert!(t.grad(b).is_none(), "constants carry no gradient");
    Ok(())
}
