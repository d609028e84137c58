//! Command-line front end: generate | train | eval | ablate.
//!
//! Thin by design — every command is a library call plus result printing.
//! Configuration is a JSON object of flat dotted keys; `OWQF_SEED`
//! overrides the seed. Usage mistakes (including open-set evaluation
//! without a category list) exit with code 2.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use owqf::commands::{cmd_ablate, cmd_eval, cmd_generate, cmd_train};
use owqf::config::RunConfig;
use owqf::eval::EvalMode;
use owqf::{Error, Result};

#[derive(Parser)]
#[command(
    name = "owqf",
    version,
    about = "Open-world query fusion on synthetic desk-scale scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset: scenes.jsonl and categories.json.
    Generate(CommonArgs),
    /// Two-stage training: grounding pretrain, then frozen-core adaptation.
    Train(CommonArgs),
    /// Score a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Train and score the four component rows into ablation.json.
    Ablate(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration: one JSON object of flat dotted keys.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to evaluate (default: <out_dir>/checkpoint.json).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluation mode.
    #[arg(long, value_parser = parse_mode)]
    mode: EvalMode,
    /// JSON array of category ids or names (required for open-set).
    #[arg(long)]
    category_list: Option<PathBuf>,
    /// User-supplied prompt points, replacing simulated ones per image.
    #[arg(long)]
    prompts: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<EvalMode, String> {
    match s {
        "open-set" => Ok(EvalMode::OpenSet),
        "open-ended" => Ok(EvalMode::OpenEnded),
        other => Err(format!("unknown mode {other:?} (use open-set or open-ended)")),
    }
}

fn load_cfg(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.out_dir = out.display().to_string();
    }
    Ok(cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "   n/a".to_string(), |x| format!("{x:.4}"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => {
            let cfg = load_cfg(&args)?;
            let a = cmd_generate(&cfg)?;
            println!(
                "wrote {} scenes over {} categories",
                a.n_scenes, a.n_categories
            );
            println!("  {}", a.scenes_path.display());
            println!("  {}", a.table_path.display());
        }
        Command::Train(args) => {
            let cfg = load_cfg(&args)?;
            let a = cmd_train(&cfg)?;
            println!(
                "pretrain: {} steps, loss {:.4} -> {:.4}",
                a.pretrain.curve.len(),
                a.pretrain.curve.first().copied().unwrap_or(f64::NAN),
                a.pretrain.final_loss
            );
            println!(
                "adapt:    {} steps, loss {:.4} -> {:.4}",
                a.adapt.curve.len(),
                a.adapt.curve.first().copied().unwrap_or(f64::NAN),
                a.adapt.final_loss
            );
            println!("  {}", a.checkpoint_path.display());
            println!("  {}", a.curves_path.display());
        }
        Command::Eval(args) => {
            let cfg = load_cfg(&args.common)?;
            let checkpoint = args
                .checkpoint
                .unwrap_or_else(|| PathBuf::from(&cfg.out_dir).join("checkpoint.json"));
            let a = cmd_eval(
                &cfg,
                &checkpoint,
                args.mode,
                args.category_list.as_deref(),
                args.prompts.as_deref(),
            )?;
            for w in &a.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{}: AP {:.4}  AP_r {}  AP_c {}  AP_f {}  ({} detections)",
                a.report.mode,
                a.report.ap,
                fmt_opt(a.report.ap_r),
                fmt_opt(a.report.ap_c),
                fmt_opt(a.report.ap_f),
                a.detections.len()
            );
            println!("  {}", a.report_path.display());
            println!("  {}", a.predictions_path.display());
        }
        Command::Ablate(args) => {
            let cfg = load_cfg(&args)?;
            let a = cmd_ablate(&cfg)?;
            println!(
                "{:<26} {:>7} {:>7} {:>7}",
                "row", "AP", "AP_r", "AP_c"
            );
            for r in &a.table.rows {
                println!(
                    "{:<26} {:>7.4} {:>7} {:>7}",
                    r.name,
                    r.ap,
                    fmt_opt(r.ap_r),
                    fmt_opt(r.ap_c)
                );
            }
            println!("  {}", a.table_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
