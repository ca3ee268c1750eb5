//! Command-line interface: stage commands, sweeps, reports and plots.

use crate::error::{Error, Result};
use crate::experiment::{
    emit_report, plot::render_plots, run_pipeline, run_sweep, ExperimentConfig, StageUpTo,
};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "sendvae",
    about = "Teacher-aligned VAE lab: synthetic data, alignment training, latent flows, latent-space evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// XORed into every stage seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Resume interrupted training from checkpoints.
    #[arg(long, default_value_t = false)]
    resume: bool,
    /// Variant name (defaults to the first configured variant).
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset (and teacher) stage only.
    GenData(CommonArgs),
    /// Run through VAE pretraining and alignment fine-tuning.
    TrainVae(CommonArgs),
    /// Run through latent flow training.
    TrainFlow(CommonArgs),
    /// Run the full pipeline including evaluation for one variant.
    Eval(CommonArgs),
    /// Run every configured variant end to end and write the sweep report.
    Sweep(CommonArgs),
    /// Rebuild the aggregate report from per-variant results on disk.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Render SVG plots from the report and training logs.
    Plot {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn pick_variant(
    cfg: &ExperimentConfig,
    requested: &Option<String>,
) -> Result<crate::experiment::VariantSpec> {
    let variants = cfg.variant_list();
    match requested {
        None => Ok(variants[0].clone()),
        Some(name) => variants
            .iter()
            .find(|v| &v.name == name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("unknown variant {name}"))),
    }
}

fn run_stage_command(args: &CommonArgs, up_to: StageUpTo) -> Result<i32> {
    let cfg = load_config(args)?;
    let variant = pick_variant(&cfg, &args.variant)?;
    let outcome = run_pipeline(&cfg, &variant, &args.out, up_to, args.resume)?;
    if let Some(partial) = &outcome.manifest.partial {
        eprintln!(
            "stage {} failed: {} (manifest marked partial)",
            partial.stage, partial.error
        );
        return Ok(3);
    }
    for s in &outcome.manifest.stages {
        println!(
            "stage {:<14} {} ({:.1}s)",
            s.name,
            if s.skipped { "skipped" } else { "ran" },
            s.wall_clock_secs
        );
    }
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(args) => run_stage_command(&args, StageUpTo::Dataset),
        Command::TrainVae(args) => run_stage_command(&args, StageUpTo::Vae),
        Command::TrainFlow(args) => run_stage_command(&args, StageUpTo::Flow),
        Command::Eval(args) => run_stage_command(&args, StageUpTo::Eval),
        Command::Sweep(args) => {
            let cfg = load_config(&args)?;
            let outcome = run_sweep(&cfg, &args.out, args.resume)?;
            for m in &outcome.manifests {
                let status = match &m.partial {
                    Some(p) => format!("PARTIAL at {} ({})", p.stage, p.error),
                    None => "complete".into(),
                };
                println!("variant {:<16} {status}", m.variant);
            }
            if outcome.partial_failures > 0 {
                eprintln!(
                    "{} of {} variants failed",
                    outcome.partial_failures,
                    outcome.manifests.len()
                );
                return Ok(4);
            }
            println!("report: {}", args.out.join("report.md").display());
            Ok(0)
        }
        Command::Report { out } => {
            let report = emit_report(&out)?;
            println!("{}", report.to_markdown());
            Ok(0)
        }
        Command::Plot { out } => {
            let files = render_plots(&out)?;
            for f in &files {
                println!("wrote {}", f.display());
            }
            Ok(0)
        }
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
