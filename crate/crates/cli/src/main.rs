use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use damagemap_cli::config::{parse_config, RunConfig};
use damagemap_cli::manifest::{sha256_str, RunLock, RunManifest};
use damagemap_cli::stages;

/// Building-damage detection on multi-date satellite imagery: patch-level
/// CNN change detection followed by spatio-temporal random-forest
/// smoothing, with imbalance-aware evaluation and an event-study validator.
#[derive(Parser)]
#[command(name = "damagemap", version, about)]
struct Cli {
    /// Path to the run configuration file.
    #[arg(long, global = true, default_value = "damagemap.conf")]
    config: PathBuf,

    /// Skip stages whose recorded inputs and outputs are unchanged.
    #[arg(long, global = true)]
    resume: bool,

    /// Replace every configured seed with values derived from this one.
    #[arg(long, global = true)]
    seed_override: Option<u64>,

    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic imagery, annotations, events and ground truth.
    Synth,
    /// Decompose each city into the 64x64 analysis grid.
    Tile,
    /// Merge annotations into patch labels and extend them through time.
    Label,
    /// Assign patches to the train/test split.
    Split,
    /// Train the stage-one change-detection network.
    Train,
    /// Score every patch at every date with the trained network.
    Scan,
    /// Train the stage-two forest, calibrate the cutoff, smooth the panels.
    Smooth,
    /// Compute test-split metrics, PR curves and plots.
    Evaluate,
    /// Regress scores on leads and lags of recorded strike events.
    Eventstudy,
    /// Emit the per-city summary table.
    Report,
    /// Run tile through evaluate, then the audit and the report.
    Pipeline,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configure worker threads")?;
    }

    let mut config = parse_config(&cli.config)?;
    if let Some(seed) = cli.seed_override {
        config.override_seeds(seed);
    }

    let _lock = RunLock::acquire(&config.output_dir)?;
    let config_hash = sha256_str(&config.canonical_string());
    let mut manifest = RunManifest::load_or_new(&config.output_dir, &config_hash)?;

    let run = |step: fn(&RunConfig, &mut RunManifest, bool) -> Result<()>,
               config: &RunConfig,
               manifest: &mut RunManifest|
     -> Result<()> { step(config, manifest, cli.resume) };

    match cli.command {
        Command::Synth => run(stages::cmd_synth, &config, &mut manifest)?,
        Command::Tile => run(stages::cmd_tile, &config, &mut manifest)?,
        Command::Label => run(stages::cmd_label, &config, &mut manifest)?,
        Command::Split => run(stages::cmd_split, &config, &mut manifest)?,
        Command::Train => run(stages::cmd_train, &config, &mut manifest)?,
        Command::Scan => run(stages::cmd_scan, &config, &mut manifest)?,
        Command::Smooth => run(stages::cmd_smooth, &config, &mut manifest)?,
        Command::Evaluate => run(stages::cmd_evaluate, &config, &mut manifest)?,
        Command::Eventstudy => run(stages::cmd_eventstudy, &config, &mut manifest)?,
        Command::Report => run(stages::cmd_report, &config, &mut manifest)?,
        Command::Pipeline => stages::cmd_pipeline(&config, &mut manifest, cli.resume)?,
    }
    manifest.save(&config.output_dir)?;
    Ok(())
}
