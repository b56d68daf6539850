//! Experiment runner: `taglab <experiment> [flags]`.
//!
//! Exit codes: 0 success, 1 check or trend failure, 2 configuration error,
//! 3 numerical divergence.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use taglab_cli::commands;
use taglab_cli::config::ExperimentConfig;
use taglab_cli::report::RunDir;

#[derive(Parser)]
#[command(name = "taglab", version, about = "Temporal-alignment-guidance experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed for every stream in the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default runs/<experiment>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for grid cells.
    #[arg(long)]
    workers: Option<usize>,
    /// Comma-separated guidance strengths, e.g. 0,0.5,1,2.
    #[arg(long, value_delimiter = ',')]
    omega: Option<Vec<f64>>,
    /// Comma-separated corruption levels.
    #[arg(long, value_delimiter = ',')]
    sigma: Option<Vec<f64>>,
    /// Trajectories per run to dump as CSV.
    #[arg(long)]
    trajectories: Option<usize>,
    /// Emit SVG line plots.
    #[arg(long)]
    plots: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the identity/property checks and write a machine-readable report.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Negative control: bias the posterior weights so the
        /// decomposition check must fail.
        #[arg(long, default_value_t = 0.0)]
        corrupt_gamma: f64,
    },
    /// Two-well benchmark: train models, drift-corrupted sampling with and
    /// without guidance, W1 and time gap per strength.
    Toy {
        #[command(flatten)]
        common: Common,
    },
    /// σ × ω corruption grid with time-gap trends.
    Corrupted {
        #[command(flatten)]
        common: Common,
    },
    /// Two-condition guidance across predictor variants.
    Multicond {
        #[command(flatten)]
        common: Common,
    },
    /// Plain vs modified Langevin first-exit study.
    Escape {
        #[command(flatten)]
        common: Common,
    },
    /// DDIM step-count sweep with and without guidance.
    Fewstep {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, String> {
    let mut cfg: ExperimentConfig = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("bad config: {e}"))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = common.workers {
        cfg.workers = workers;
    }
    if let Some(omega) = &common.omega {
        cfg.omega_grid = omega.clone();
    }
    if let Some(sigma) = &common.sigma {
        cfg.sigma_grid = sigma.clone();
    }
    if let Some(n) = common.trajectories {
        cfg.dump_trajectories = n;
    }
    if common.plots {
        cfg.plots = true;
    }
    cfg.mixture.validate().map_err(|e| format!("bad mixture: {e}"))?;
    if cfg.omega_grid.is_empty() || cfg.sigma_grid.is_empty() || cfg.nfe_grid.is_empty() {
        return Err("grids must be nonempty".into());
    }
    Ok(cfg)
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<taglab_core::Error>() {
        Some(taglab_core::Error::TrainingDiverged { .. })
        | Some(taglab_core::Error::NonFinite { .. }) => 3,
        Some(_) => 2,
        None => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common, corrupt_gamma): (&str, &Common, f64) = match &cli.command {
        Command::Verify { common, corrupt_gamma } => ("verify", common, *corrupt_gamma),
        Command::Toy { common } => ("toy", common, 0.0),
        Command::Corrupted { common } => ("corrupted", common, 0.0),
        Command::Multicond { common } => ("multicond", common, 0.0),
        Command::Escape { common } => ("escape", common, 0.0),
        Command::Fewstep { common } => ("fewstep", common, 0.0),
    };

    let mut cfg = match load_config(common) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("configuration error: {msg}");
            return ExitCode::from(2);
        }
    };
    cfg.corrupt_gamma = corrupt_gamma;

    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
    let dir = match RunDir::create(&out) {
        Ok(dir) => dir,
        Err(e) => {
            eprintln!("configuration error: {e}");
            return ExitCode::from(2);
        }
    };

    let result = match &cli.command {
        Command::Verify { .. } => commands::cmd_verify(&cfg, &dir),
        Command::Toy { .. } => commands::cmd_toy(&cfg, &dir),
        Command::Corrupted { .. } => commands::cmd_corrupted(&cfg, &dir),
        Command::Multicond { .. } => commands::cmd_multicond(&cfg, &dir),
        Command::Escape { .. } => commands::cmd_escape(&cfg, &dir),
        Command::Fewstep { .. } => commands::cmd_fewstep(&cfg, &dir),
    };

    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{name}: checks or trends did not hold (see report.json)");
            ExitCode::from(1)
        }
        Err(e) => {
            let code = exit_code_for(&e);
            eprintln!("{name} failed: {e}");
            ExitCode::from(code)
        }
    }
}
