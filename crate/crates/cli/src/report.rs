//! Run artifacts: manifest.json, results.csv ledger, report.json, and
//! trajectory dumps. No timestamps anywhere — outputs are byte-stable for a
//! fixed config and seed.

use crate::config::ExperimentConfig;
use anyhow::{Context, Result};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use taglab_core::metrics::RunSummary;
use taglab_core::sampler::TrajectorySet;

pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub fn create(out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(RunDir { dir: out.to_path_buf() })
    }

    /// Replay information: experiment name, resolved config, its hash, the
    /// seed, and the code version.
    pub fn write_manifest(&self, experiment: &str, config: &ExperimentConfig) -> Result<()> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            experiment: &'a str,
            version: &'a str,
            seed: u64,
            config_hash: String,
            config: &'a ExperimentConfig,
        }
        let manifest = Manifest {
            experiment,
            version: env!("CARGO_PKG_VERSION"),
            seed: config.seed,
            config_hash: config.hash(),
            config,
        };
        self.write_json("manifest.json", &manifest)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let path = self.dir.join(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    /// One CSV row per run summary.
    pub fn write_results_csv(&self, rows: &[RunSummary]) -> Result<()> {
        let mut out = String::from("experiment,label,seed,config_hash,time_gap_mean,sliced_w1,nll\n");
        for r in rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.experiment,
                r.label,
                r.seed,
                r.config_hash,
                r.time_gap_mean.map(|v| v.to_string()).unwrap_or_default(),
                r.sliced_w1.map(|v| v.to_string()).unwrap_or_default(),
                r.nll.map(|v| v.to_string()).unwrap_or_default(),
            ));
        }
        let path = self.dir.join("results.csv");
        fs::write(&path, out).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    /// Dump the first `limit` trajectories of a set.
    pub fn write_trajectories(&self, name: &str, set: &TrajectorySet, limit: usize) -> Result<()> {
        if limit == 0 {
            return Ok(());
        }
        let mut subset = set.clone();
        subset.trajectories.truncate(limit);
        let path = self.dir.join(name);
        let mut file = fs::File::create(&path)?;
        subset.write_csv(name.trim_end_matches(".csv"), &mut file)?;
        Ok(())
    }
}
