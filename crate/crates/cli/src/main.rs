use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use symlevel_core::dataset::PRESETS;
use symlevel_cli::commands::{self, Ctx, Outcome};
use symlevel_cli::config::{parse_override, PipelineConfig};

/// Self-supervised detection of per-input rotation symmetry levels.
#[derive(Parser, Debug)]
#[command(name = "symlevel", version, about)]
struct Cli {
    /// Pipeline config file (`key = value` per line).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory shared by all stages.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed for data, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Symmetry family of the boundary head and pseudo-labels.
    #[arg(long, global = true, value_parser = ["uniform", "gaussian", "cyclic"])]
    family: Option<String>,
    /// Override any config key, e.g. `--set pretrain.epochs=30`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Re-run stages even when their inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Named per-class symmetry profile.
    #[arg(long, value_parser = PossibleValuesParser::new(PRESETS))]
    preset: Option<String>,
    /// Explicit per-class specs, e.g. `uniform:30,uniform:90`.
    #[arg(long)]
    profile: Option<String>,
    /// Base images: rendered glyphs or an MNIST-style IDX directory.
    #[arg(long, value_parser = ["glyph", "idx"])]
    corpus: Option<String>,
    /// Number of classes taken from the base corpus.
    #[arg(long)]
    classes: Option<usize>,
    /// Base images per class before the train/val/test split.
    #[arg(long)]
    per_class: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct OracleArg {
    /// Use ground-truth angles and levels instead of trained networks.
    #[arg(long)]
    oracle: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the base corpus and write train/val/test symmetry datasets.
    GenData(DataArgs),
    /// Train the invariant-equivariant autoencoder.
    Pretrain {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compute latent codes and group actions for the training split.
    Embed,
    /// Estimate each sample's symmetry level from its latent neighbours.
    Pseudolabel {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train the boundary network on the pseudo-labels.
    TrainTheta {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Per-class mean predicted level and MAE on the test split.
    Eval(OracleArg),
    /// Undo each input's estimated rotation and compare a downstream classifier.
    Standardize(OracleArg),
    /// Flag fully rotated unseen inputs outside their predicted distribution.
    Ood(OracleArg),
    /// Check the analytic propositions on synthetic classes.
    Testbed,
    /// Every stage from data generation to OOD evaluation.
    Run(DataArgs),
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            out.push((k.to_string(), v));
        }
    };
    push("out", cli.out.as_ref().map(|p| p.display().to_string()));
    push("seed", cli.seed.map(|s| s.to_string()));
    push("family", cli.family.clone());
    let data = match &cli.command {
        Command::GenData(d) | Command::Run(d) => Some(d),
        _ => None,
    };
    if let Some(d) = data {
        push("preset", d.preset.clone());
        push("profile", d.profile.clone());
        push("corpus", d.corpus.clone());
        push("classes", d.classes.map(|v| v.to_string()));
        push("per_class", d.per_class.map(|v| v.to_string()));
    }
    match &cli.command {
        Command::Pretrain { epochs } => push("pretrain.epochs", epochs.map(|v| v.to_string())),
        Command::TrainTheta { epochs } => push("theta.epochs", epochs.map(|v| v.to_string())),
        Command::Pseudolabel { k } => push("k", k.map(|v| v.to_string())),
        _ => {}
    }
    for s in &cli.overrides {
        out.push(parse_override(s)?);
    }
    Ok(out)
}

fn print(outcome: &Outcome) {
    let note = if outcome.skipped { " (unchanged, skipped)" } else { "" };
    println!("[{}]{note}", outcome.stage.dir_name());
    print!("{}", outcome.summary);
}

fn run(cli: Cli) -> Result<()> {
    let cfg = PipelineConfig::load(cli.config.as_deref(), &overrides(&cli)?)?;
    let oracle = match &cli.command {
        Command::Eval(o) | Command::Standardize(o) | Command::Ood(o) => o.oracle,
        _ => false,
    };
    let ctx = Ctx {
        cfg,
        force: cli.force,
        oracle,
    };
    let outcomes = match cli.command {
        Command::GenData(_) => vec![commands::cmd_gen_data(&ctx)?],
        Command::Pretrain { .. } => vec![commands::cmd_pretrain(&ctx)?],
        Command::Embed => vec![commands::cmd_embed(&ctx)?],
        Command::Pseudolabel { .. } => vec![commands::cmd_pseudolabel(&ctx)?],
        Command::TrainTheta { .. } => vec![commands::cmd_train_theta(&ctx)?],
        Command::Eval(_) => vec![commands::cmd_eval(&ctx)?],
        Command::Standardize(_) => vec![commands::cmd_standardize(&ctx)?],
        Command::Ood(_) => vec![commands::cmd_ood(&ctx)?],
        Command::Testbed => vec![commands::cmd_testbed(&ctx)?],
        Command::Run(_) => commands::cmd_run(&ctx)?,
    };
    outcomes.iter().for_each(print);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
