//! Experiment configuration: one JSON file per run, every field optional
//! with documented defaults, CLI flags overriding file values. The resolved
//! config (defaults included) is what lands in the manifest.

use serde::{Deserialize, Serialize};
use taglab_core::guidance::{ConditionSpec, LossKind, PropertyFn};
use taglab_core::sampler::SamplerKind;
use taglab_core::schedule::OmegaKind;
use taglab_core::GaussianMixture;

/// Schedule settings: linear β ramp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        // The standard DDPM range at 100 steps; ᾱ_T ≈ 0.36, which is what
        // makes the two-well runs start visibly off-manifold.
        ScheduleConfig { num_steps: 100, beta_min: 1e-4, beta_max: 0.02 }
    }
}

/// A fully noised variant (ᾱ_T ≈ 2e-5) used by the corruption and few-step
/// experiments, where the baseline chain should be self-consistent.
pub fn fully_noised() -> ScheduleConfig {
    ScheduleConfig { num_steps: 100, beta_min: 1e-3, beta_max: 0.2 }
}

/// Training settings for one model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: vec![128, 128], epochs: 5000, learning_rate: 1e-4 }
    }
}

/// Desk-scale training defaults: narrower nets and a larger step for a few
/// CPU minutes total. The widths are a recorded choice, not ground truth.
pub fn desk_score_model() -> ModelConfig {
    ModelConfig { hidden: vec![32, 32], epochs: 1200, learning_rate: 1e-3 }
}

pub fn desk_time_predictor() -> ModelConfig {
    ModelConfig { hidden: vec![32, 32, 32, 32], epochs: 500, learning_rate: 1e-3 }
}

/// Escape-study settings; defaults are the recorded wide-well instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EscapeConfig {
    pub mixture: GaussianMixture,
    pub betas: Vec<f64>,
    pub target_step: usize,
    /// ε as a fraction of the peak density of p_k.
    pub epsilon_fraction: f64,
    pub init_point: Vec<f64>,
    pub step_size: f64,
    pub max_steps: usize,
    pub trials: usize,
}

impl Default for EscapeConfig {
    fn default() -> Self {
        EscapeConfig {
            mixture: GaussianMixture::new(
                vec![0.5, 0.5],
                vec![vec![-60.0], vec![60.0]],
                vec![100.0, 100.0],
            )
            .expect("escape mixture valid"),
            betas: vec![1e-4, 0.9999],
            target_step: 1,
            epsilon_fraction: 1e-3,
            init_point: vec![0.0],
            step_size: 0.05,
            max_steps: 5000,
            trials: 500,
        }
    }
}

/// Multi-condition task settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MulticondConfig {
    pub cond1: ConditionSpec,
    pub cond2: ConditionSpec,
    pub rho0: f64,
    /// |property - target| band counted as satisfied.
    pub satisfaction_band: f64,
}

impl Default for MulticondConfig {
    fn default() -> Self {
        MulticondConfig {
            cond1: ConditionSpec {
                property: PropertyFn::Coordinate { index: 0 },
                target: vec![10.0],
                loss: LossKind::Absolute,
            },
            cond2: ConditionSpec {
                property: PropertyFn::Coordinate { index: 1 },
                target: vec![10.0],
                loss: LossKind::Absolute,
            },
            rho0: 1.0,
            satisfaction_band: 3.0,
        }
    }
}

/// Top-level experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub workers: usize,
    /// Data / marginal mixture; defaults to the two-well benchmark.
    pub mixture: GaussianMixture,
    /// None = per-experiment default: the standard range for toy/multicond
    /// (off-manifold start), the fully noised variant for corrupted/fewstep.
    pub schedule: Option<ScheduleConfig>,
    pub score_model: ModelConfig,
    pub time_predictor: ModelConfig,
    /// Train the score model / predictor instead of using the analytic
    /// oracle (toy always trains; corrupted/fewstep default to analytic).
    pub use_learned: bool,
    pub n_train: usize,
    pub n_samples: usize,
    pub omega_grid: Vec<f64>,
    pub omega_kind: OmegaKind,
    pub sigma_grid: Vec<f64>,
    pub drift_scale: f64,
    pub nfe_grid: Vec<usize>,
    pub sampler: SamplerKind,
    pub w1_projections: usize,
    /// Trajectories per run dumped to CSV (0 = none).
    pub dump_trajectories: usize,
    pub multicond: MulticondConfig,
    pub escape: EscapeConfig,
    /// Emit per-metric SVG line plots.
    pub plots: bool,
    /// Debug negative control: bias the posterior weights inside the
    /// verification suite so the identity checks must fail.
    pub corrupt_gamma: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            workers: 2,
            mixture: GaussianMixture::toy_two_wells(),
            schedule: None,
            score_model: desk_score_model(),
            time_predictor: desk_time_predictor(),
            use_learned: false,
            n_train: 40_000,
            n_samples: 4096,
            omega_grid: vec![0.0, 0.25, 0.5, 1.0, 2.0, 4.0],
            omega_kind: OmegaKind::SqrtOneMinusAbar,
            sigma_grid: vec![0.4],
            drift_scale: -0.01,
            nfe_grid: vec![1, 3, 5, 10, 50],
            sampler: SamplerKind::Ddpm,
            w1_projections: 64,
            dump_trajectories: 0,
            multicond: MulticondConfig::default(),
            escape: EscapeConfig::default(),
            plots: false,
            corrupt_gamma: 0.0,
        }
    }
}

impl ExperimentConfig {
    /// Schedule from the config, falling back to the experiment's default.
    pub fn resolve_schedule(
        &self,
        default: ScheduleConfig,
    ) -> taglab_core::Result<(ScheduleConfig, taglab_core::NoiseSchedule)> {
        let sc = self.schedule.clone().unwrap_or(default);
        let schedule = taglab_core::NoiseSchedule::linear(sc.num_steps, sc.beta_min, sc.beta_max)?;
        Ok((sc, schedule))
    }

    /// Canonical JSON of the resolved config.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// FNV-1a 64 over the canonical JSON with execution-only knobs (worker
    /// count, plot emission, trajectory dumping) normalized away: the hash
    /// identifies the experiment, and serial vs parallel runs of the same
    /// experiment share it.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.workers = 0;
        canonical.plots = false;
        canonical.dump_trajectories = 0;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in canonical.canonical_json().as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        format!("{h:016x}")
    }
}
