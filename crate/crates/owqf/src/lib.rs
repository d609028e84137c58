//! Open-world query fusion: a desk-scale, fully trainable detection decoder
//! that fuses two query families — "general" queries seeded from external
//! point prompts and "specific" queries drawn from a ranked learnable bank —
//! and trains the fusion with denoising points sampled around ground truth.
//! Everything runs on a scalar reverse-mode tape ([`tensor`]), on synthetic
//! scenes with known geometry ([`world`]), so every mechanism is checkable
//! against oracles.
//!
//! The pipeline, end to end:
//!
//! 1. [`world`] builds a category table (unit-norm embeddings bucketed
//!    rare/common/frequent), samples box scenes, and renders multi-level
//!    feature pyramids.
//! 2. [`prompt`] simulates a point-prompt source over those features with a
//!    tunable fidelity knob (attention-map surrogate, local-maximum picking).
//! 3. [`query`] turns prompts into general queries (bilinear point features
//!    + ranked pairing against a learnable bank) and grid cells into
//!    specific queries.
//! 4. [`denoise`] samples positive/negative training points in bands around
//!    each ground-truth box and builds the group leak mask.
//! 5. [`decoder`] runs the fused stack — self-attention over the joint
//!    query set, text/image cross-attention, partitioned box heads with
//!    logit-space refinement.
//! 6. [`loss`] matches predictions to ground truth (Hungarian), scores
//!    focal/L1/GIoU grounding terms, and [`model`] assembles the staged
//!    training loss (pretrain the core, then freeze it and adapt the fusion
//!    path).
//! 7. [`eval`] scores detections with fixed AP over IoU thresholds
//!    0.5..0.95 in the two protocols: open-set (fixed category list) and
//!    open-ended (emit embeddings, map back to names by cosine).
//! 8. [`commands`] wires the above into the four reproducible CLI verbs
//!    (`generate`, `train`, `eval`, `ablate`) used by the `owqf` binary.
//!
//! Start with the runnable examples, each a self-contained walkthrough:
//!
//! - `generate_world` — categories, scenes, rendered pyramids, ASCII layout.
//! - `autodiff_gradcheck` — the tape and numeric gradient checking.
//! - `denoising_points` — point bands, polarity, the group leak mask.
//! - `prompt_pipeline` — simulator fidelity sweep and prompt anatomy.
//! - `query_fusion_decode` — one fused decode, layer by layer.
//! - `train_smoke` — the 50-step, sub-minute training budget run.
//! - `detect_scene` — single-image inference with an ASCII overlay.
//! - `dual_mode_eval` — open-set vs open-ended scoring of one model.
//! - `ablation_table` — shared pretrain, four adaptation rows.

pub mod commands;
pub mod config;
pub mod decoder;
pub mod denoise;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod nn;
pub mod prompt;
pub mod query;
pub mod tensor;
pub mod train;
pub mod world;

pub use error::{Error, Result};
