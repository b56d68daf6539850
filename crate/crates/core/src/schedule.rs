//! Discrete VP forward-process coefficients and guidance-strength schedules.
//!
//! The forward SDE is the variance-preserving process
//! `dx = -1/2 β(t) x dt + sqrt(β(t)) dw`, discretized the DDPM way:
//! `x_t = sqrt(ᾱ_t) x_0 + sqrt(1 - ᾱ_t) ε` with `ᾱ_t = Π_{s≤t} (1 - β_s)`.
//! Step indices run 1..=T; `ᾱ_0 = 1` by convention (clean data).

use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

/// Trapezoid panels per unit time for continuous-time quadrature; the error
/// at this resolution is far below every tolerance used in the tests.
pub const QUADRATURE_PANELS_PER_UNIT: usize = 1024;

/// Discrete noise schedule: per-step rates β_t and cumulative signal ᾱ_t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// Number of diffusion steps.
    #[serde(rename = "T")]
    pub num_steps: usize,
    /// β_t for t = 1..=T, each in (0, 1).
    pub betas: Vec<f64>,
    /// ᾱ_t for t = 1..=T, strictly decreasing, each in (0, 1].
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Build from per-step rates; ᾱ is the running product of (1 - β).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidParameter("schedule needs T >= 1 steps".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for (i, &b) in betas.iter().enumerate() {
            if !(0.0..1.0).contains(&b) || b == 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "beta[{i}] = {b} outside (0, 1)"
                )));
            }
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        let schedule = NoiseSchedule { num_steps: betas.len(), betas, alpha_bars };
        schedule.validate()?;
        Ok(schedule)
    }

    /// Standard linear β schedule from `beta_min` to `beta_max` over T steps.
    pub fn linear(num_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidParameter("T must be >= 1".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas = (0..num_steps)
            .map(|i| {
                if num_steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (num_steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Build from a strictly decreasing ᾱ sequence; β_t is recovered from
    /// consecutive ratios so the product relation holds by construction.
    pub fn from_alpha_bars(alpha_bars: Vec<f64>) -> Result<Self> {
        let mut betas = Vec::with_capacity(alpha_bars.len());
        let mut prev = 1.0;
        for &ab in &alpha_bars {
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        let schedule = NoiseSchedule { num_steps: alpha_bars.len(), betas, alpha_bars };
        schedule.validate()?;
        Ok(schedule)
    }

    /// Check all type invariants; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let t = self.num_steps;
        if t == 0 || self.betas.len() != t || self.alpha_bars.len() != t {
            return Err(Error::InvalidParameter("schedule arrays must have length T >= 1".into()));
        }
        let mut prev = 1.0;
        let mut prod = 1.0;
        for i in 0..t {
            let b = self.betas[i];
            let ab = self.alpha_bars[i];
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidParameter(format!("beta[{i}] = {b} outside (0, 1)")));
            }
            if !(ab > 0.0 && ab <= 1.0 && ab < prev) {
                return Err(Error::InvalidParameter(format!(
                    "alpha_bar[{i}] = {ab} not strictly decreasing in (0, 1]"
                )));
            }
            // Tolerance scales with the previous level: recovering β from a
            // ratio of nearby ᾱ values keeps only absolute precision ~ε·prev.
            prod *= 1.0 - b;
            if (prod - ab).abs() > 1e-9 * prev {
                return Err(Error::InvalidParameter(format!(
                    "alpha_bar[{i}] does not match the product of (1 - beta)"
                )));
            }
            prev = ab;
        }
        Ok(())
    }

    /// ᾱ_t for t in 0..=T, with ᾱ_0 = 1 (no noise).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// β_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps {
            return Err(Error::IndexOutOfRange { index: t, max: self.num_steps });
        }
        Ok(())
    }

    /// Draw `x_t ~ q(x_t | x_0)` at step t with the given noise stream.
    pub fn forward_perturb(&self, x0: &[f64], t: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        self.check_step(t)?;
        let eps = rng.gaussian_vec(x0.len());
        Ok(perturb_with_alpha_bar(x0, self.alpha_bar(t), &eps))
    }

    /// JSON form `{"T":…, "betas":[…], "alpha_bars":[…]}` at full precision.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("schedule serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let schedule: NoiseSchedule = serde_json::from_str(s)?;
        schedule.validate()?;
        Ok(schedule)
    }
}

/// `sqrt(ᾱ) x_0 + sqrt(1-ᾱ) ε` with the noise pinned by the caller.
pub fn perturb_with_alpha_bar(x0: &[f64], alpha_bar: f64, eps: &[f64]) -> Vec<f64> {
    let signal = alpha_bar.sqrt();
    let noise = (1.0 - alpha_bar).sqrt();
    x0.iter().zip(eps).map(|(&x, &e)| signal * x + noise * e).collect()
}

/// Score from an ε-prediction: `∇ log p_t = -ε / sqrt(1 - ᾱ_t)`.
pub fn eps_to_score(eps: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&alpha_bar) {
        return Err(Error::InvalidParameter(format!(
            "eps_to_score needs alpha_bar in [0, 1), got {alpha_bar}"
        )));
    }
    let scale = -1.0 / (1.0 - alpha_bar).sqrt();
    Ok(eps.iter().map(|&e| scale * e).collect())
}

/// Exact inverse of [`eps_to_score`]: `ε = -sqrt(1 - ᾱ_t) ∇ log p_t`.
pub fn score_to_eps(score: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&alpha_bar) {
        return Err(Error::InvalidParameter(format!(
            "score_to_eps needs alpha_bar in [0, 1), got {alpha_bar}"
        )));
    }
    let scale = -(1.0 - alpha_bar).sqrt();
    Ok(score.iter().map(|&s| scale * s).collect())
}

/// Guidance-strength schedule families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaKind {
    /// ω_t = ω₀ · sqrt(1 - ᾱ_t)
    SqrtOneMinusAbar,
    /// ω_t = ω₀ · (1 - ᾱ_t)
    OneMinusAbar,
    /// ω_t = ω₀
    Constant,
}

/// Scheduled guidance strength at step t.
pub fn omega_schedule(
    kind: OmegaKind,
    omega0: f64,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if omega0 < 0.0 {
        return Err(Error::InvalidParameter(format!("omega0 must be >= 0, got {omega0}")));
    }
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    Ok(match kind {
        OmegaKind::SqrtOneMinusAbar => omega0 * (1.0 - ab).sqrt(),
        OmegaKind::OneMinusAbar => omega0 * (1.0 - ab),
        OmegaKind::Constant => omega0,
    })
}

/// Composite trapezoid integral of `f` over [0, t].
pub fn trapezoid(f: impl Fn(f64) -> f64, t: f64, panels: usize) -> f64 {
    if t == 0.0 || panels == 0 {
        return 0.0;
    }
    let h = t / panels as f64;
    let mut acc = 0.5 * (f(0.0) + f(t));
    for i in 1..panels {
        acc += f(i as f64 * h);
    }
    acc * h
}

/// Continuous-time signal coefficient `exp(-1/2 ∫₀ᵗ β(s) ds)` via composite
/// trapezoid quadrature at [`QUADRATURE_PANELS_PER_UNIT`] resolution.
///
/// Note this is the coefficient multiplying x_0 in the VP mean, i.e. the
/// square root of the discrete product Π(1-β); callers comparing against
/// `alpha_bars` should square it (or double β).
pub fn alpha_bar_continuous(beta_fn: impl Fn(f64) -> f64, t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::InvalidParameter(format!("time must be >= 0, got {t}")));
    }
    let panels = (QUADRATURE_PANELS_PER_UNIT as f64 * t.max(1.0)).ceil() as usize;
    let integral = trapezoid(beta_fn, t, panels);
    Ok((-0.5 * integral).exp())
}
