//! Command-line front end: `synth`, `train`, `track`, `eval`, `report`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cmot::config::{resolve_workspace, RunConfig};
use cmot::pipeline::{self, StagePlanKind};

#[derive(Parser)]
#[command(
    name = "cmot",
    about = "Cross-modal (RGB/NIR) single-object tracking toolkit",
    version
)]
struct Cli {
    /// Workspace directory (falls back to $CMOT_WORKSPACE, then
    /// ./cmot-workspace).
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,

    /// Run configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark (train/test splits plus converted
    /// dual-modality fixtures).
    Synth {
        /// Regenerate even if the benchmark directory exists.
        #[arg(long)]
        force: bool,
    },
    /// Train a tracker variant on the benchmark's train split.
    Train {
        /// Training schedule: `three` (staged) or `one` (joint ablation).
        #[arg(long, default_value = "three")]
        stages: String,
        /// Build the network without the modality-aware block.
        #[arg(long)]
        no_marmot: bool,
        /// Variant name; defaults to marmot-<stages> or baseline-<stages>.
        #[arg(long)]
        name: Option<String>,
    },
    /// Track the test split with a trained checkpoint.
    Track {
        /// Checkpoint file to load.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run the identity-substitution baseline (no block).
        #[arg(long)]
        no_marmot: bool,
        /// Name of the results directory.
        #[arg(long, default_value = "tracker")]
        name: String,
        /// Parallel sequence workers.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Evaluate one or more result sets and write reports.
    Eval {
        /// Result-set names under results/ (repeatable).
        #[arg(long = "results", required = true)]
        results: Vec<String>,
    },
    /// Re-render plots and tables from a stored report.json.
    Report {
        /// Path to a report.json.
        #[arg(long)]
        report: PathBuf,
        /// Output directory for the rendered files.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> cmot::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> cmot::Result<()> {
    let workspace = resolve_workspace(cli.workspace.clone());
    let cfg = load_config(&cli)?;

    match &cli.command {
        Command::Synth { force } => {
            let summary = pipeline::cmd_synth(&cfg, &workspace, *force)?;
            println!(
                "benchmark: {} train / {} test sequences; {} converted ({} discarded)",
                summary.train, summary.test, summary.converted_kept, summary.converted_discarded
            );
            for (bin, n) in &summary.switch_histogram {
                println!("  switches {bin}: {n}");
            }
        }
        Command::Train { stages, no_marmot, name } => {
            let plan = StagePlanKind::parse(stages)?;
            let with_marmot = cfg.net.with_marmot && !no_marmot;
            let default_name = format!(
                "{}-{}",
                if with_marmot { "marmot" } else { "baseline" },
                stages
            );
            let name = name.clone().unwrap_or(default_name);
            let manifest = pipeline::cmd_train(&cfg, &workspace, &name, plan, with_marmot)?;
            println!("trained {}: {} stage(s)", manifest.variant, manifest.stages.len());
            for stage in &manifest.stages {
                println!(
                    "  {:?}: {} iterations, loss {:.4} -> {:.4}",
                    stage.stage, stage.iterations, stage.first_loss, stage.final_loss
                );
            }
            println!("checkpoints: {}", manifest.checkpoints.join(", "));
        }
        Command::Track { checkpoint, no_marmot, name, jobs } => {
            let jobs = jobs.unwrap_or(cfg.jobs);
            let summary =
                pipeline::cmd_track(&cfg, &workspace, checkpoint, name, *no_marmot, jobs)?;
            println!(
                "tracked {} sequences as {:?} (mean first-frame accuracy {:.3})",
                summary.sequences, summary.name, summary.mean_init_accuracy
            );
        }
        Command::Eval { results } => {
            let reports = pipeline::cmd_eval(&cfg, &workspace, results)?;
            let mut rows: Vec<_> = reports.iter().collect();
            rows.sort_by(|a, b| b.1.scores.sr1.partial_cmp(&a.1.scores.sr1).unwrap());
            println!("tracker            PR     NPR    SR-I   SR-II");
            for (name, rep) in rows {
                println!(
                    "{name:<18} {:.4} {:.4} {:.4} {:.4}",
                    rep.scores.pr, rep.scores.npr, rep.scores.sr1, rep.scores.sr2
                );
            }
        }
        Command::Report { report, out } => {
            let files = pipeline::cmd_report(report, out)?;
            for f in files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
