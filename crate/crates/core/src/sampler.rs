//! Reverse-process machinery: ancestral DDPM and deterministic DDIM steps,
//! Tweedie estimates, guided sampling with the timestep-posterior gradient,
//! external-drift and corrupted reverse processes, and plain/modified
//! Langevin correctors with first-exit measurement.
//!
//! All samplers run through one engine so that zero-strength variants reduce
//! bitwise to the base sampler: randomness is drawn from per-(trajectory,
//! step, purpose) derived streams, guidance is skipped exactly when its
//! scheduled strength is zero, and injected corruption is scaled by σ.
//!
//! Guidance is applied after the reverse step, to the freshly produced
//! state, with the time-linked score targeted at the arrival step (clamped
//! to step 1 on the final move, since the class set has no index 0).

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mixture::{GaussianMixture, MarginalFamily};
use crate::net::{self, Mlp};
use crate::rng::Rng;
use crate::schedule::{eps_to_score, omega_schedule, NoiseSchedule, OmegaKind};
use rayon::prelude::*;

const TAG_INIT: u64 = 0x494e_4954_5f54;
const TAG_STEP_NOISE: u64 = 0x4e4f_4953_455f;
const TAG_CORRUPT: u64 = 0x434f_5252_5550;
const TAG_ESCAPE: u64 = 0x4553_4341_5045;

/// Marginal-score provider with a uniform calling contract: the exact score
/// of the perturbed mixture, or a trained ε-prediction network converted
/// through -ε̂/sqrt(1-ᾱ_t).
pub enum ScoreSource<'a> {
    Analytic { family: MarginalFamily, schedule: &'a NoiseSchedule },
    Learned { model: &'a Mlp, schedule: &'a NoiseSchedule },
}

impl<'a> ScoreSource<'a> {
    pub fn analytic(gm0: &GaussianMixture, schedule: &'a NoiseSchedule) -> Result<Self> {
        Ok(ScoreSource::Analytic { family: MarginalFamily::new(gm0, schedule)?, schedule })
    }

    pub fn learned(model: &'a Mlp, schedule: &'a NoiseSchedule) -> Self {
        ScoreSource::Learned { model, schedule }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        match self {
            ScoreSource::Analytic { schedule, .. } => schedule,
            ScoreSource::Learned { schedule, .. } => schedule,
        }
    }

    /// ∇ log p_t(x) for a single point.
    pub fn score(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        match self {
            ScoreSource::Analytic { family, .. } => family.score(x, t),
            ScoreSource::Learned { model, schedule } => {
                let xs = Matrix::from_vec(1, x.len(), x.to_vec());
                let eps = net::eps_predict_batch(model, &xs, t, schedule.num_steps)?;
                eps_to_score(&eps.data, schedule.alpha_bar(t))
            }
        }
    }

    /// Batch scores, one row per sample.
    pub fn score_batch(&self, xs: &Matrix, t: usize) -> Result<Matrix> {
        match self {
            ScoreSource::Analytic { family, .. } => {
                let d = xs.cols;
                let rows: Vec<Vec<f64>> = (0..xs.rows)
                    .into_par_iter()
                    .map(|r| family.score(xs.row(r), t))
                    .collect::<Result<_>>()?;
                let mut out = Matrix::zeros(xs.rows, d);
                for (r, row) in rows.into_iter().enumerate() {
                    out.row_mut(r).copy_from_slice(&row);
                }
                Ok(out)
            }
            ScoreSource::Learned { model, schedule } => {
                let mut eps = net::eps_predict_batch(model, xs, t, schedule.num_steps)?;
                let ab = schedule.alpha_bar(t);
                if ab >= 1.0 {
                    return Err(Error::InvalidParameter(
                        "learned score undefined at alpha_bar = 1".into(),
                    ));
                }
                let scale = -1.0 / (1.0 - ab).sqrt();
                eps.data.iter_mut().for_each(|v| *v *= scale);
                Ok(eps)
            }
        }
    }
}

/// Time-linked-score provider: exact timestep-posterior gradient, or the
/// input gradient of a trained timestep classifier.
pub enum TlsSource<'a> {
    Analytic { family: MarginalFamily },
    Predictor { model: &'a Mlp },
}

impl<'a> TlsSource<'a> {
    pub fn analytic(gm0: &GaussianMixture, schedule: &NoiseSchedule) -> Result<Self> {
        Ok(TlsSource::Analytic { family: MarginalFamily::new(gm0, schedule)? })
    }

    pub fn predictor(model: &'a Mlp) -> Self {
        TlsSource::Predictor { model }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            TlsSource::Analytic { family } => family.num_steps(),
            TlsSource::Predictor { model } => model.output_dim(),
        }
    }

    /// ∇ log p(t | x) for one point.
    pub fn tls(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        match self {
            TlsSource::Analytic { family } => family.tls_analytic(x, t),
            TlsSource::Predictor { model } => net::predictor_tls(model, x, t),
        }
    }

    /// Batch TLS, one row per sample.
    pub fn tls_batch(&self, xs: &Matrix, t: usize) -> Result<Matrix> {
        match self {
            TlsSource::Analytic { family } => {
                let rows: Vec<Vec<f64>> = (0..xs.rows)
                    .into_par_iter()
                    .map(|r| family.tls_analytic(xs.row(r), t))
                    .collect::<Result<_>>()?;
                let mut out = Matrix::zeros(xs.rows, xs.cols);
                for (r, row) in rows.into_iter().enumerate() {
                    out.row_mut(r).copy_from_slice(&row);
                }
                Ok(out)
            }
            TlsSource::Predictor { model } => net::predictor_tls_batch(model, xs, t),
        }
    }

    /// Argmax predicted step per row (ties toward the smaller index).
    pub fn predicted_steps_batch(&self, xs: &Matrix) -> Result<Vec<usize>> {
        match self {
            TlsSource::Analytic { family } => (0..xs.rows)
                .into_par_iter()
                .map(|r| Ok(family.time_posterior(xs.row(r))?.argmax_step()))
                .collect(),
            TlsSource::Predictor { model } => {
                let (logits, _) = model.forward_batch(xs)?;
                Ok((0..logits.rows).map(|r| net::argmax(logits.row(r)) + 1).collect())
            }
        }
    }
}

/// One reverse-process run: states at every visited step (first entry is the
/// initial draw), the guidance vector applied on each move, and optionally
/// the argmax predicted step of each post-move state.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub index: usize,
    pub seed: u64,
    pub dim: usize,
    /// (moves + 1) × dim, aligned with the run's `step_indices`.
    pub states: Vec<f64>,
    /// moves × dim; zero rows where no guidance was applied.
    pub applied_guidance: Vec<f64>,
    /// Argmax predicted step of each post-move state (length = moves) when
    /// recording was enabled; empty otherwise.
    pub predicted_times: Vec<usize>,
}

impl Trajectory {
    /// State after the j-th recorded position (0 = initial draw).
    pub fn state(&self, j: usize) -> &[f64] {
        &self.states[j * self.dim..(j + 1) * self.dim]
    }

    pub fn guidance(&self, j: usize) -> &[f64] {
        &self.applied_guidance[j * self.dim..(j + 1) * self.dim]
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.states.len() / self.dim - 1)
    }
}

/// A batch of trajectories sharing one step schedule and seed.
#[derive(Debug, Clone)]
pub struct TrajectorySet {
    pub dim: usize,
    /// Visited step indices, strictly descending, ending at 0.
    pub step_indices: Vec<usize>,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectorySet {
    pub fn n(&self) -> usize {
        self.trajectories.len()
    }

    /// Terminal states flattened row-major (n × dim).
    pub fn terminal_states(&self) -> Matrix {
        let mut out = Matrix::zeros(self.n(), self.dim);
        for (r, traj) in self.trajectories.iter().enumerate() {
            out.row_mut(r).copy_from_slice(traj.terminal());
        }
        out
    }

    /// CSV rows: `run_id,trajectory,step,x0..x{d-1},predicted_time,guidance_norm`.
    pub fn write_csv(&self, run_id: &str, out: &mut impl std::io::Write) -> std::io::Result<()> {
        write!(out, "run_id,trajectory,step")?;
        for j in 0..self.dim {
            write!(out, ",x{j}")?;
        }
        writeln!(out, ",predicted_time,guidance_norm")?;
        for traj in &self.trajectories {
            for (j, &step) in self.step_indices.iter().enumerate() {
                write!(out, "{run_id},{},{step}", traj.index)?;
                for v in traj.state(j) {
                    write!(out, ",{v}")?;
                }
                if j == 0 {
                    writeln!(out, ",,")?;
                } else {
                    let pt = traj.predicted_times.get(j - 1).map(|t| t.to_string());
                    let gnorm =
                        traj.guidance(j - 1).iter().map(|v| v * v).sum::<f64>().sqrt();
                    writeln!(out, ",{},{gnorm}", pt.unwrap_or_default())?;
                }
            }
        }
        Ok(())
    }
}

/// Reverse-step family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

/// Guidance settings for a run.
pub struct TagConfig<'a> {
    pub tls: &'a TlsSource<'a>,
    pub omega_kind: OmegaKind,
    pub omega0: f64,
}

pub type DriftFn = dyn Fn(&[f64], usize) -> Vec<f64> + Sync;

/// Full engine configuration. The spec-level entry points below are thin
/// wrappers over this.
pub struct ReverseConfig<'a> {
    pub kind: SamplerKind,
    /// Visited step indices, strictly descending from T to 0.
    pub steps: Vec<usize>,
    pub n_trajectories: usize,
    pub seed: u64,
    /// Noise injected before every reverse step (0 disables).
    pub corruption_sigma: f64,
    pub tag: Option<TagConfig<'a>>,
    pub drift: Option<&'a DriftFn>,
    pub record_predicted_times: bool,
}

/// Every step index from T down to 0.
pub fn full_step_indices(num_steps: usize) -> Vec<usize> {
    (0..=num_steps).rev().collect()
}

/// Evenly spaced descending indices for an `nfe`-evaluation DDIM run:
/// T, …, 0 with nfe moves.
pub fn ddim_step_indices(num_steps: usize, nfe: usize) -> Vec<usize> {
    let nfe = nfe.max(1).min(num_steps);
    let mut steps: Vec<usize> =
        (0..=nfe).map(|j| ((nfe - j) * num_steps + nfe / 2) / nfe).collect();
    steps.dedup();
    steps
}

/// Tweedie's denoised estimate: `x̂₀ = (x_t + (1-ᾱ_t) ∇log p_t(x_t)) / √ᾱ_t`.
pub fn tweedie_x0hat(
    score_src: &ScoreSource,
    x_t: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let score = score_src.score(x_t, t)?;
    Ok(tweedie_update(x_t, &score, schedule.alpha_bar(t)))
}

pub(crate) fn tweedie_update(x: &[f64], score: &[f64], alpha_bar: f64) -> Vec<f64> {
    let inv_signal = 1.0 / alpha_bar.sqrt();
    x.iter().zip(score).map(|(&xv, &sv)| (xv + (1.0 - alpha_bar) * sv) * inv_signal).collect()
}

fn ddpm_update(x: &mut [f64], score: &[f64], beta: f64, z: &[f64]) {
    let inv = 1.0 / (1.0 - beta).sqrt();
    let sd = beta.sqrt();
    for i in 0..x.len() {
        x[i] = (x[i] + beta * score[i]) * inv + sd * z[i];
    }
}

pub(crate) fn ddim_update(x: &mut [f64], score: &[f64], ab_t: f64, ab_prev: f64) {
    // x̂₀ and ε̂ from the score, then the deterministic jump.
    let inv_signal = 1.0 / ab_t.sqrt();
    let noise_t = (1.0 - ab_t).sqrt();
    let signal_prev = ab_prev.sqrt();
    let noise_prev = (1.0 - ab_prev).sqrt();
    for i in 0..x.len() {
        let x0 = (x[i] + (1.0 - ab_t) * score[i]) * inv_signal;
        let eps = -noise_t * score[i];
        x[i] = signal_prev * x0 + noise_prev * eps;
    }
}

/// One ancestral DDPM step t → t-1 with reverse variance σ_t² = β_t:
/// `x_{t-1} = (x_t + β_t ∇log p_t) / √(1-β_t) + √β_t z`.
pub fn ddpm_step(
    score_src: &ScoreSource,
    x_t: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if t == 0 || t > schedule.num_steps {
        return Err(Error::IndexOutOfRange { index: t, max: schedule.num_steps });
    }
    let score = score_src.score(x_t, t)?;
    let z = rng.gaussian_vec(x_t.len());
    let mut x = x_t.to_vec();
    ddpm_update(&mut x, &score, schedule.beta(t), &z);
    Ok(x)
}

/// One deterministic DDIM jump t → t_prev:
/// `x_{t_prev} = √ᾱ_{t_prev} x̂₀ + √(1-ᾱ_{t_prev}) ε̂`.
pub fn ddim_step(
    score_src: &ScoreSource,
    x_t: &[f64],
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if t == 0 || t > schedule.num_steps {
        return Err(Error::IndexOutOfRange { index: t, max: schedule.num_steps });
    }
    if t_prev >= t {
        return Err(Error::InvalidParameter(format!(
            "ddim requires t_prev < t, got {t_prev} >= {t}"
        )));
    }
    let score = score_src.score(x_t, t)?;
    let mut x = x_t.to_vec();
    ddim_update(&mut x, &score, schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
    Ok(x)
}

/// Per-trajectory initial draws x_T ~ N(0, I) from the run's init streams.
pub(crate) fn draw_initial_states(seed: u64, n: usize, d: usize) -> Matrix {
    let mut states = Matrix::zeros(n, d);
    for i in 0..n {
        let mut rng = Rng::from_stream(seed, &[TAG_INIT, i as u64]);
        for v in states.row_mut(i) {
            *v = rng.next_gaussian();
        }
    }
    states
}

/// Run the reverse engine. States start from x_T ~ N(0, I) per trajectory.
pub fn run_reverse(score_src: &ScoreSource, config: &ReverseConfig) -> Result<TrajectorySet> {
    let schedule = score_src.schedule();
    let steps = &config.steps;
    if steps.len() < 2 || *steps.last().unwrap() != 0 {
        return Err(Error::InvalidParameter("step schedule must end at 0".into()));
    }
    if steps.windows(2).any(|w| w[1] >= w[0]) || steps[0] > schedule.num_steps {
        return Err(Error::InvalidParameter("step schedule must be strictly descending".into()));
    }
    if config.kind == SamplerKind::Ddpm && steps.windows(2).any(|w| w[0] - w[1] != 1) {
        return Err(Error::InvalidParameter("ancestral sampling cannot skip steps".into()));
    }
    if config.corruption_sigma < 0.0 {
        return Err(Error::InvalidParameter("corruption sigma must be >= 0".into()));
    }
    let d = match score_src {
        ScoreSource::Analytic { family, .. } => family.marginals[0].dim(),
        ScoreSource::Learned { model, .. } => model.input_dim() - net::TIME_EMBED_DIM,
    };
    let n = config.n_trajectories;
    let moves = steps.len() - 1;

    let mut states = draw_initial_states(config.seed, n, d);

    let mut trajectories: Vec<Trajectory> = (0..n)
        .map(|i| Trajectory {
            index: i,
            seed: config.seed,
            dim: d,
            states: Vec::with_capacity((moves + 1) * d),
            applied_guidance: Vec::with_capacity(moves * d),
            predicted_times: Vec::new(),
        })
        .collect();
    for (i, traj) in trajectories.iter_mut().enumerate() {
        traj.states.extend_from_slice(states.row(i));
    }

    for w in steps.windows(2) {
        let (t, t_prev) = (w[0], w[1]);

        // Injected corruption before the reverse step (scaled by σ, so σ = 0
        // leaves states bit-identical).
        let sigma = config.corruption_sigma;
        for i in 0..n {
            let mut rng = Rng::from_stream(config.seed, &[TAG_CORRUPT, i as u64, t as u64]);
            for v in states.row_mut(i) {
                *v += sigma * rng.next_gaussian();
            }
        }

        let mut score = score_src.score_batch(&states, t)?;
        if let Some(drift) = config.drift {
            for i in 0..n {
                let v = drift(states.row(i), t);
                if v.len() != d || v.iter().any(|c| !c.is_finite()) {
                    return Err(Error::NonFinite { context: "drift" });
                }
                for (sv, dv) in score.row_mut(i).iter_mut().zip(&v) {
                    *sv += dv;
                }
            }
        }

        match config.kind {
            SamplerKind::Ddpm => {
                let beta = schedule.beta(t);
                for i in 0..n {
                    let mut rng =
                        Rng::from_stream(config.seed, &[TAG_STEP_NOISE, i as u64, t as u64]);
                    let z = rng.gaussian_vec(d);
                    ddpm_update(states.row_mut(i), score.row(i), beta, &z);
                }
            }
            SamplerKind::Ddim => {
                let (ab_t, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
                for i in 0..n {
                    ddim_update(states.row_mut(i), score.row(i), ab_t, ab_prev);
                }
            }
        }

        // Guidance after the step, targeting the arrival index (clamped to 1
        // on the final move).
        let mut applied: Option<Matrix> = None;
        if let Some(tag) = &config.tag {
            let omega = omega_schedule(tag.omega_kind, tag.omega0, t, schedule)?;
            if omega != 0.0 {
                let target = t_prev.max(1);
                let mut g = tag.tls.tls_batch(&states, target)?;
                g.data.iter_mut().for_each(|v| *v *= omega);
                for i in 0..n {
                    for (sv, gv) in states.row_mut(i).iter_mut().zip(g.row(i)) {
                        *sv += gv;
                    }
                }
                applied = Some(g);
            }
        }

        let predicted = if config.record_predicted_times {
            match &config.tag {
                Some(tag) => Some(tag.tls.predicted_steps_batch(&states)?),
                None => None,
            }
        } else {
            None
        };

        for (i, traj) in trajectories.iter_mut().enumerate() {
            traj.states.extend_from_slice(states.row(i));
            match &applied {
                Some(g) => traj.applied_guidance.extend_from_slice(g.row(i)),
                None => traj.applied_guidance.extend(std::iter::repeat(0.0).take(d)),
            }
            if let Some(p) = &predicted {
                traj.predicted_times.push(p[i]);
            }
        }
    }

    Ok(TrajectorySet { dim: d, step_indices: steps.clone(), seed: config.seed, trajectories })
}

/// Plain reverse sampling over every step.
pub fn sample_plain(
    score_src: &ScoreSource,
    kind: SamplerKind,
    n: usize,
    seed: u64,
) -> Result<TrajectorySet> {
    run_reverse(
        score_src,
        &ReverseConfig {
            kind,
            steps: full_step_indices(score_src.schedule().num_steps),
            n_trajectories: n,
            seed,
            corruption_sigma: 0.0,
            tag: None,
            drift: None,
            record_predicted_times: false,
        },
    )
}

/// Guided sampling: reverse step to x̃, then x ← x̃ + ω_t · TLS(x̃, arrival).
/// ω ≡ 0 is bitwise the base sampler under the same seed.
pub fn sample_with_tag(
    score_src: &ScoreSource,
    tls: &TlsSource,
    omega_kind: OmegaKind,
    omega0: f64,
    kind: SamplerKind,
    n: usize,
    seed: u64,
) -> Result<TrajectorySet> {
    run_reverse(
        score_src,
        &ReverseConfig {
            kind,
            steps: full_step_indices(score_src.schedule().num_steps),
            n_trajectories: n,
            seed,
            corruption_sigma: 0.0,
            tag: Some(TagConfig { tls, omega_kind, omega0 }),
            drift: None,
            record_predicted_times: false,
        },
    )
}

/// Reverse sampling with an external drift added to the score term at every
/// step (the off-manifold corruption of the two-well experiment).
pub fn sample_with_drift(
    score_src: &ScoreSource,
    drift: &DriftFn,
    n: usize,
    seed: u64,
) -> Result<TrajectorySet> {
    run_reverse(
        score_src,
        &ReverseConfig {
            kind: SamplerKind::Ddpm,
            steps: full_step_indices(score_src.schedule().num_steps),
            n_trajectories: n,
            seed,
            corruption_sigma: 0.0,
            tag: None,
            drift: Some(drift),
            record_predicted_times: false,
        },
    )
}

/// Corrupted reverse process: x_t ← x_t + σ ε before each reverse step,
/// guidance after it. σ = 0 and ω = 0 reduce bitwise to the plain sampler.
pub fn sample_corrupted(
    score_src: &ScoreSource,
    tls: &TlsSource,
    sigma: f64,
    omega_kind: OmegaKind,
    omega0: f64,
    n: usize,
    seed: u64,
) -> Result<TrajectorySet> {
    run_reverse(
        score_src,
        &ReverseConfig {
            kind: SamplerKind::Ddpm,
            steps: full_step_indices(score_src.schedule().num_steps),
            n_trajectories: n,
            seed,
            corruption_sigma: sigma,
            tag: Some(TagConfig { tls, omega_kind, omega0 }),
            drift: None,
            record_predicted_times: false,
        },
    )
}

/// Euler–Maruyama Langevin step targeting p_k: drift is the marginal score.
pub fn langevin_step(
    score_src: &ScoreSource,
    x: &[f64],
    k: usize,
    step_size: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if step_size <= 0.0 {
        return Err(Error::InvalidParameter("step size must be > 0".into()));
    }
    let drift = score_src.score(x, k)?;
    Ok(euler_maruyama(x, &drift, step_size, rng))
}

/// Langevin drift sharpened by the timestep posterior:
/// `s_k - Σ_{i≠k} γᵢ sᵢ` with γᵢ = pᵢ/p_tot. Reduces to the plain drift when
/// there is a single step.
pub fn modified_langevin_drift(family: &MarginalFamily, x: &[f64], k: usize) -> Result<Vec<f64>> {
    let gamma = family.time_posterior(x)?.probs;
    let mut drift = family.score(x, k)?;
    for i in 1..=family.num_steps() {
        if i == k {
            continue;
        }
        let s_i = family.score(x, i)?;
        for (dv, sv) in drift.iter_mut().zip(&s_i) {
            *dv -= gamma[i - 1] * sv;
        }
    }
    Ok(drift)
}

/// Euler–Maruyama step with the sharpened drift.
pub fn modified_langevin_step(
    family: &MarginalFamily,
    x: &[f64],
    k: usize,
    step_size: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if step_size <= 0.0 {
        return Err(Error::InvalidParameter("step size must be > 0".into()));
    }
    let drift = modified_langevin_drift(family, x, k)?;
    Ok(euler_maruyama(x, &drift, step_size, rng))
}

fn euler_maruyama(x: &[f64], drift: &[f64], h: f64, rng: &mut Rng) -> Vec<f64> {
    let sd = (2.0 * h).sqrt();
    x.iter().zip(drift).map(|(&xv, &dv)| xv + h * dv + sd * rng.next_gaussian()).collect()
}

/// Langevin flavor for the escape study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LangevinKind {
    Plain,
    Modified,
}

/// Initial distribution for escape trials.
#[derive(Debug, Clone)]
pub enum InitDist {
    Point(Vec<f64>),
    Gaussian { mean: Vec<f64>, sd: f64 },
}

impl InitDist {
    fn draw(&self, rng: &mut Rng) -> Vec<f64> {
        match self {
            InitDist::Point(p) => p.clone(),
            InitDist::Gaussian { mean, sd } => {
                mean.iter().map(|&m| m + sd * rng.next_gaussian()).collect()
            }
        }
    }
}

/// First-exit statistics from the low-density set {p_k ≤ ε}.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EscapeReport {
    pub trials: usize,
    pub censored: usize,
    /// First step with p_k(x) > ε, per uncensored trial.
    pub exit_steps: Vec<usize>,
    /// Mean over uncensored trials; None when every trial was censored.
    pub mean_exit: Option<f64>,
    pub median_exit: Option<f64>,
    pub all_censored: bool,
}

/// Simulate first-exit times of plain or modified Langevin started inside
/// {p_k ≤ ε}; a trial already outside at step 0 exits immediately. Censored
/// trials are excluded from the mean but counted in the report.
#[allow(clippy::too_many_arguments)]
pub fn estimate_escape_time(
    kind: LangevinKind,
    family: &MarginalFamily,
    k: usize,
    epsilon: f64,
    init: &InitDist,
    step_size: f64,
    max_steps: usize,
    trials: usize,
    seed: u64,
) -> Result<EscapeReport> {
    if trials == 0 || epsilon <= 0.0 || step_size <= 0.0 {
        return Err(Error::InvalidParameter(
            "escape study needs trials >= 1, epsilon > 0, step size > 0".into(),
        ));
    }
    let log_eps = epsilon.ln();
    let target = &family.marginals[k - 1];
    let exits: Vec<Option<usize>> = (0..trials)
        .into_par_iter()
        .map(|trial| -> Result<Option<usize>> {
            let mut rng = Rng::from_stream(seed, &[TAG_ESCAPE, trial as u64]);
            let mut x = init.draw(&mut rng);
            if target.log_density(&x)? > log_eps {
                return Ok(Some(0));
            }
            for step in 1..=max_steps {
                x = match kind {
                    LangevinKind::Plain => {
                        let drift = family.score(&x, k)?;
                        euler_maruyama(&x, &drift, step_size, &mut rng)
                    }
                    LangevinKind::Modified => {
                        let drift = modified_langevin_drift(family, &x, k)?;
                        euler_maruyama(&x, &drift, step_size, &mut rng)
                    }
                };
                if target.log_density(&x)? > log_eps {
                    return Ok(Some(step));
                }
            }
            Ok(None)
        })
        .collect::<Result<_>>()?;

    let exit_steps: Vec<usize> = exits.iter().filter_map(|e| *e).collect();
    let censored = trials - exit_steps.len();
    let mean_exit = if exit_steps.is_empty() {
        None
    } else {
        Some(exit_steps.iter().sum::<usize>() as f64 / exit_steps.len() as f64)
    };
    let median_exit = if exit_steps.is_empty() {
        None
    } else {
        let mut sorted = exit_steps.clone();
        sorted.sort_unstable();
        Some(if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2] as f64
        } else {
            (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) as f64 / 2.0
        })
    };
    Ok(EscapeReport {
        trials,
        censored,
        exit_steps,
        mean_exit,
        median_exit,
        all_censored: censored == trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::GaussianMixture;
    use crate::schedule::NoiseSchedule;

    fn std_normal_source(schedule: &NoiseSchedule) -> ScoreSource<'_> {
        // N(0, I) is a VP fixed point, so every marginal is N(0, I) and the
        // exact score is -x at every step.
        let gm = GaussianMixture::standard_normal(2);
        ScoreSource::analytic(&gm, schedule).unwrap()
    }

    #[test]
    fn tweedie_pinned_cases() {
        let schedule = NoiseSchedule::from_alpha_bars(vec![0.25]).unwrap();
        let src = std_normal_source(&schedule);
        // Exact score of N(0, I) data: x̂₀ = √ᾱ x_t.
        let x0 = tweedie_x0hat(&src, &[2.0, 2.0], 1, &schedule).unwrap();
        assert!((x0[0] - 1.0).abs() < 1e-12 && (x0[1] - 1.0).abs() < 1e-12);

        // ᾱ = 1 (t = 0): x̂₀ = x_t for any finite score.
        let x = tweedie_update(&[0.7, -0.3], &[123.0, -7.0], 1.0);
        assert_eq!(x, vec![0.7, -0.3]);
    }

    #[test]
    fn tweedie_matches_posterior_mean_oracle() {
        let mut rng = Rng::new(44);
        let gm = GaussianMixture::toy_two_wells();
        let schedule = NoiseSchedule::linear(10, 0.01, 0.3).unwrap();
        let src = ScoreSource::analytic(&gm, &schedule).unwrap();
        for t in [1usize, 5, 10] {
            for _ in 0..10 {
                let x: Vec<f64> = (0..2).map(|_| 20.0 * (rng.next_f64() - 0.5)).collect();
                let a = tweedie_x0hat(&src, &x, t, &schedule).unwrap();
                let b = gm.posterior_mean_x0(&x, schedule.alpha_bar(t)).unwrap();
                for (u, v) in a.iter().zip(&b) {
                    assert!((u - v).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn ddpm_step_frozen_limit() {
        // With score = 0 and pinned z = 0, β → 0 leaves the state unchanged.
        let mut x = [1.5, -2.5];
        let x_before = x;
        ddpm_update(&mut x, &[0.0, 0.0], 1e-300, &[0.0, 0.0]);
        assert!((x[0] - x_before[0]).abs() < 1e-12 && (x[1] - x_before[1]).abs() < 1e-12);
    }

    #[test]
    fn ddpm_stationary_on_standard_normal() {
        let schedule = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        let src = std_normal_source(&schedule);
        let set = sample_plain(&src, SamplerKind::Ddpm, 10_000, 99).unwrap();
        let term = set.terminal_states();
        let n = term.rows as f64;
        let mut mean = [0.0, 0.0];
        for r in 0..term.rows {
            mean[0] += term.get(r, 0);
            mean[1] += term.get(r, 1);
        }
        mean[0] /= n;
        mean[1] /= n;
        assert!(mean[0].abs() < 0.05 && mean[1].abs() < 0.05, "mean {mean:?}");
        let mut cov = [[0.0; 2]; 2];
        for r in 0..term.rows {
            let a = [term.get(r, 0) - mean[0], term.get(r, 1) - mean[1]];
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += a[i] * a[j] / n;
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((cov[i][j] - expect).abs() < 0.1, "cov {cov:?}");
            }
        }
    }

    #[test]
    fn ddpm_chain_deterministic_given_seed() {
        let schedule = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let src = std_normal_source(&schedule);
        let a = sample_plain(&src, SamplerKind::Ddpm, 5, 7).unwrap();
        let b = sample_plain(&src, SamplerKind::Ddpm, 5, 7).unwrap();
        for (ta, tb) in a.trajectories.iter().zip(&b.trajectories) {
            assert_eq!(ta.states, tb.states);
        }
    }

    #[test]
    fn ddim_pinned_value() {
        // Data N(0, I), ᾱ_t = 0.25 → ᾱ_prev = 0.5, x_t = (1, 0):
        // factor √0.125 + √0.375 = 0.965926.
        let schedule = NoiseSchedule::from_alpha_bars(vec![0.5, 0.25]).unwrap();
        let src = std_normal_source(&schedule);
        let x = ddim_step(&src, &[1.0, 0.0], 2, 1, &schedule).unwrap();
        assert!((x[0] - 0.9659258262890682).abs() < 1e-12, "got {}", x[0]);
        assert!(x[1].abs() < 1e-15);
        assert!(ddim_step(&src, &[1.0, 0.0], 1, 1, &schedule).is_err());
    }

    #[test]
    fn ddim_terminal_step_returns_x0hat() {
        let gm = GaussianMixture::toy_two_wells();
        let schedule = NoiseSchedule::linear(10, 0.01, 0.3).unwrap();
        let src = ScoreSource::analytic(&gm, &schedule).unwrap();
        let x_t = [3.0, -1.0];
        let jump = ddim_step(&src, &x_t, 4, 0, &schedule).unwrap();
        let x0 = tweedie_x0hat(&src, &x_t, 4, &schedule).unwrap();
        for (a, b) in jump.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    // DDIM jumps compose exactly when the noise-direction estimate is
    // invariant along the trajectory, which holds in the near-point-mass
    // limit of a single Gaussian (the affine flow preserves ε̂).
    #[test]
    fn ddim_skip_consistency_on_degenerate_gaussian() {
        let gm = GaussianMixture::new(vec![1.0], vec![vec![2.0, -1.0]], vec![1e-12]).unwrap();
        let schedule = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        let src = ScoreSource::analytic(&gm, &schedule).unwrap();
        let x4 = [0.6, 1.9];
        let two_hops = {
            let x2 = ddim_step(&src, &x4, 4, 2, &schedule).unwrap();
            ddim_step(&src, &x2, 2, 0, &schedule).unwrap()
        };
        let four_hops = {
            let mut x = x4.to_vec();
            for t in (1..=4).rev() {
                x = ddim_step(&src, &x, t, t - 1, &schedule).unwrap();
            }
            x
        };
        for (a, b) in two_hops.iter().zip(&four_hops) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_strength_reductions_are_bitwise() {
        let gm = GaussianMixture::toy_two_wells();
        let schedule = NoiseSchedule::linear(30, 1e-3, 0.2).unwrap();
        let src = ScoreSource::analytic(&gm, &schedule).unwrap();
        let tls = TlsSource::analytic(&gm, &schedule).unwrap();

        let base = sample_plain(&src, SamplerKind::Ddpm, 8, 1234).unwrap();
        let tagged =
            sample_with_tag(&src, &tls, OmegaKind::SqrtOneMinusAbar, 0.0, SamplerKind::Ddpm, 8, 1234)
                .unwrap();
        let corrupted =
            sample_corrupted(&src, &tls, 0.0, OmegaKind::SqrtOneMinusAbar, 0.0, 8, 1234).unwrap();
        let zero_drift = |x: &[f64], _: usize| vec![0.0; x.len()];
        let drifted = sample_with_drift(&src, &zero_drift, 8, 1234).unwrap();

        for other in [&tagged, &corrupted, &drifted] {
            for (a, b) in base.trajectories.iter().zip(&other.trajectories) {
                assert_eq!(a.states, b.states);
            }
        }
    }

    #[test]
    fn single_class_tag_guidance_is_zero() {
        let gm = GaussianMixture::toy_two_wells();
        let schedule = NoiseSchedule::from_betas(vec![0.5]).unwrap();
        let src = ScoreSource::analytic(&gm, &schedule).unwrap();
        let tls = TlsSource::analytic(&gm, &schedule).unwrap();
        let set = sample_with_tag(
            &src,
            &tls,
            OmegaKind::Constant,
            2.0,
            SamplerKind::Ddpm,
            4,
            9,
        )
        .unwrap();
        for traj in &set.trajectories {
            assert!(traj.applied_guidance.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn recorded_guidance_matches_post_hoc_recomputation() {
        let gm = GaussianMixture::toy_two_wells();
        let schedule = NoiseSchedule::linear(12, 1e-3, 0.25).unwrap();
        let src = ScoreSource::analytic(&gm, &schedule).unwrap();
        let tls = TlsSource::analytic(&gm, &schedule).unwrap();
        let set = sample_with_tag(
            &src,
            &tls,
            OmegaKind::SqrtOneMinusAbar,
            1.5,
            SamplerKind::Ddpm,
            4,
            77,
        )
        .unwrap();
        for traj in &set.trajectories {
            for (j, w) in set.step_indices.windows(2).enumerate() {
                let (t, t_prev) = (w[0], w[1]);
                let omega =
                    omega_schedule(OmegaKind::SqrtOneMinusAbar, 1.5, t, &schedule).unwrap();
                // The recorded post-move state already includes the guidance;
                // recompute TLS at the pre-guidance point.
                let post = traj.state(j + 1);
                let g = traj.guidance(j);
                let pre: Vec<f64> = post.iter().zip(g).map(|(a, b)| a - b).collect();
                let recomputed = tls.tls(&pre, t_prev.max(1)).unwrap();
                for (gv, rv) in g.iter().zip(&recomputed) {
                    assert!((gv - omega * rv).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn drift_rejects_non_finite() {
        let gm = GaussianMixture::standard_normal(1);
        let schedule = NoiseSchedule::linear(5, 0.05, 0.3).unwrap();
        let src = ScoreSource::analytic(&gm, &schedule).unwrap();
        let bad = |_: &[f64], _: usize| vec![f64::INFINITY];
        assert!(sample_with_drift(&src, &bad, 2, 1).is_err());
    }

    #[test]
    fn ddim_step_indices_cover_endpoints() {
        assert_eq!(ddim_step_indices(100, 1), vec![100, 0]);
        let s = ddim_step_indices(100, 5);
        assert_eq!(s.first(), Some(&100));
        assert_eq!(s.last(), Some(&0));
        assert_eq!(s.len(), 6);
        assert!(s.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(ddim_step_indices(10, 10), full_step_indices(10));
    }

    #[test]
    fn langevin_basics() {
        let gm = GaussianMixture::standard_normal(2);
        let schedule = NoiseSchedule::linear(3, 0.05, 0.3).unwrap();
        let src = ScoreSource::analytic(&gm, &schedule).unwrap();
        let family = MarginalFamily::new(&gm, &schedule).unwrap();

        // Zero step size rejected; a pinned-noise step at a mode stays put.
        assert!(langevin_step(&src, &[0.0, 0.0], 1, 0.0, &mut Rng::new(1)).is_err());
        // At the mode of p_k the plain drift is zero, so with z = 0 the state
        // is unchanged: emulate by checking the drift directly.
        let drift = src.score(&[0.0, 0.0], 1).unwrap();
        assert!(drift.iter().all(|v| v.abs() < 1e-14));

        // Modified drift equals the plain drift when T = 1.
        let one = NoiseSchedule::from_betas(vec![0.5]).unwrap();
        let fam1 = MarginalFamily::new(&gm, &one).unwrap();
        let plain = fam1.score(&[0.7, -0.2], 1).unwrap();
        let modified = modified_langevin_drift(&fam1, &[0.7, -0.2], 1).unwrap();
        assert_eq!(plain, modified);

        // Modified drift = modified_score + γ_k s_k (the posterior-weighted
        // self-term is the only difference between the two expressions).
        let x = [0.4, -1.1];
        let k = 2;
        let gamma = family.time_posterior(&x).unwrap().probs;
        let s_k = family.score(&x, k).unwrap();
        let ms = family.modified_score(&x, k).unwrap();
        let md = modified_langevin_drift(&family, &x, k).unwrap();
        for i in 0..2 {
            assert!((md[i] - (ms[i] + gamma[k - 1] * s_k[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn escape_time_zero_when_started_outside() {
        let gm = GaussianMixture::standard_normal(1);
        let schedule = NoiseSchedule::from_betas(vec![0.01, 0.5]).unwrap();
        let family = MarginalFamily::new(&gm, &schedule).unwrap();
        // Density at the mode is ~0.4; starting there with ε = 1e-3 means
        // p_k(x₀) > ε immediately.
        let report = estimate_escape_time(
            LangevinKind::Plain,
            &family,
            1,
            1e-3,
            &InitDist::Point(vec![0.0]),
            0.01,
            100,
            20,
            5,
        )
        .unwrap();
        assert_eq!(report.censored, 0);
        assert!(report.exit_steps.iter().all(|s| *s == 0));
        assert_eq!(report.mean_exit, Some(0.0));
    }

    #[test]
    fn escape_flags_all_censored() {
        // An impossible threshold keeps every trial censored.
        let gm = GaussianMixture::standard_normal(1);
        let schedule = NoiseSchedule::from_betas(vec![0.01]).unwrap();
        let family = MarginalFamily::new(&gm, &schedule).unwrap();
        let report = estimate_escape_time(
            LangevinKind::Plain,
            &family,
            1,
            1e30,
            &InitDist::Point(vec![0.0]),
            0.01,
            5,
            4,
            5,
        )
        .unwrap();
        assert!(report.all_censored);
        assert_eq!(report.mean_exit, None);
    }

    #[test]
    fn csv_emission_shape() {
        let gm = GaussianMixture::standard_normal(2);
        let schedule = NoiseSchedule::linear(3, 0.05, 0.3).unwrap();
        let src = ScoreSource::analytic(&gm, &schedule).unwrap();
        let set = sample_plain(&src, SamplerKind::Ddpm, 2, 3).unwrap();
        let mut buf = Vec::new();
        set.write_csv("run0", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "run_id,trajectory,step,x0,x1,predicted_time,guidance_norm");
        // 2 trajectories × 4 recorded states + header.
        assert_eq!(lines.len(), 1 + 2 * 4);
        assert!(lines[1].starts_with("run0,0,3,"));
    }
}
