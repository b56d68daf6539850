//! Named identity and property checks over randomized instances, with
//! machine-readable reports.
//!
//! The checks pin the exact relationships the rest of the crate relies on:
//! the two computation routes of the timestep-posterior gradient agree, the
//! guidance-modified score matches its closed form with normalized posterior
//! weights, the discrete decomposition converges to its continuous-time
//! limit, the Tweedie estimate equals the exact posterior mean, and the
//! drift-energy bound vanishes at zero drift and scales quadratically.
//!
//! `gamma_bias` is a negative control: it perturbs the posterior weights
//! inside the decomposition route so the identity check must fail.

use crate::error::Result;
use crate::mixture::{self, GaussianMixture, MarginalFamily};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use serde::Serialize;

/// Result of one named check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub threshold_abs: f64,
    pub threshold_rel: f64,
    pub instances: usize,
    pub details: String,
}

/// Verification suite settings.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Instances for the exact-identity checks.
    pub identity_instances: usize,
    /// Instances for the continuous-limit refinement study.
    pub continuous_instances: usize,
    /// Instances for the Tweedie check.
    pub tweedie_instances: usize,
    /// Monte-Carlo draws per step in the drift-bound check.
    pub drift_mc_samples: usize,
    /// Negative-control bias added to the posterior weights in the
    /// decomposition route (0 = honest run).
    pub gamma_bias: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 17,
            identity_instances: 1000,
            continuous_instances: 100,
            tweedie_instances: 1000,
            drift_mc_samples: 256,
            gamma_bias: 0.0,
        }
    }
}

/// Run every check; the report order is stable.
pub fn run_all(config: &VerifyConfig) -> Result<Vec<CheckReport>> {
    Ok(vec![
        check_tls_identity(config)?,
        check_modified_score(config)?,
        check_continuous_limit(config)?,
        check_tweedie(config)?,
        check_drift_bound_scaling(config)?,
    ])
}

fn random_instance(rng: &mut Rng) -> (GaussianMixture, NoiseSchedule, Vec<f64>, usize) {
    let dim = 1 + rng.next_range(3);
    let k = 1 + rng.next_range(4);
    let raw: Vec<f64> = (0..k).map(|_| 0.2 + rng.next_f64()).collect();
    let total: f64 = raw.iter().sum();
    let gm = GaussianMixture::new(
        raw.iter().map(|w| w / total).collect(),
        (0..k).map(|_| (0..dim).map(|_| 6.0 * (rng.next_f64() - 0.5)).collect()).collect(),
        (0..k).map(|_| 0.3 + 2.2 * rng.next_f64()).collect(),
    )
    .expect("random mixture valid");
    let steps = 1 + rng.next_range(8);
    let betas: Vec<f64> = (0..steps).map(|_| 0.01 + 0.3 * rng.next_f64()).collect();
    let schedule = NoiseSchedule::from_betas(betas).expect("random schedule valid");
    let x: Vec<f64> = (0..dim).map(|_| 8.0 * (rng.next_f64() - 0.5)).collect();
    let t = 1 + rng.next_range(steps);
    (gm, schedule, x, t)
}

/// The decomposition route with optionally biased posterior weights.
fn tls_decomposed_biased(
    family: &MarginalFamily,
    x: &[f64],
    t: usize,
    bias: f64,
) -> Result<Vec<f64>> {
    let gamma = family.time_posterior(x)?.probs;
    let scores: Vec<Vec<f64>> =
        family.marginals.iter().map(|m| m.score(x)).collect::<Result<_>>()?;
    let s_t = &scores[t - 1];
    let mut out = vec![0.0; x.len()];
    for k in 0..family.num_steps() {
        if k == t - 1 {
            continue;
        }
        for j in 0..x.len() {
            out[j] += (gamma[k] + bias) * (s_t[j] - scores[k][j]);
        }
    }
    Ok(out)
}

/// Timestep-posterior gradient: closed form vs. literal decomposition.
pub fn check_tls_identity(config: &VerifyConfig) -> Result<CheckReport> {
    let mut rng = Rng::from_stream(config.seed, &[1]);
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for _ in 0..config.identity_instances {
        let (gm, schedule, x, t) = random_instance(&mut rng);
        let family = MarginalFamily::new(&gm, &schedule)?;
        let a = family.tls_analytic(&x, t)?;
        let b = tls_decomposed_biased(&family, &x, t, config.gamma_bias)?;
        let abs = max_abs_diff(&a, &b);
        let scale = norm_inf(&a).max(norm_inf(&b)).max(1e-12);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / scale);
    }
    let (threshold_abs, threshold_rel) = (1e-10, 1e-8);
    Ok(CheckReport {
        name: "tls_identity",
        passed: max_abs < threshold_abs && max_rel < threshold_rel,
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        threshold_abs,
        threshold_rel,
        instances: config.identity_instances,
        details: "closed-form timestep-posterior gradient vs literal decomposition".into(),
    })
}

/// Modified score equals s_k - Σ γᵢ sᵢ with Σ γᵢ = 1.
pub fn check_modified_score(config: &VerifyConfig) -> Result<CheckReport> {
    let mut rng = Rng::from_stream(config.seed, &[2]);
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for _ in 0..config.identity_instances {
        let (gm, schedule, x, t) = random_instance(&mut rng);
        let family = MarginalFamily::new(&gm, &schedule)?;
        let gamma = family.time_posterior(&x)?.probs;
        let gamma_sum: f64 = gamma.iter().sum();
        let ms = family.modified_score(&x, t)?;
        // Independent evaluation of s_k - Σ γᵢ sᵢ.
        let mut reference = family.score(&x, t)?;
        for i in 1..=family.num_steps() {
            let s_i = family.score(&x, i)?;
            for (r, sv) in reference.iter_mut().zip(&s_i) {
                *r -= (gamma[i - 1] + config.gamma_bias) * sv;
            }
        }
        let abs = max_abs_diff(&ms, &reference).max((gamma_sum - 1.0).abs());
        let scale = norm_inf(&ms).max(1.0);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / scale);
    }
    let (threshold_abs, threshold_rel) = (1e-12, 1e-12);
    Ok(CheckReport {
        name: "modified_score_identity",
        passed: max_abs < threshold_abs,
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        threshold_abs,
        threshold_rel,
        instances: config.identity_instances,
        details: "guidance-modified score vs s_k - Σ γ s with normalized weights".into(),
    })
}

/// Gentle random instances for the refinement study: small total β mass so
/// the first-order Riemann error dominates at every tested resolution.
fn random_continuous_instance(rng: &mut Rng) -> (GaussianMixture, f64, f64, Vec<f64>) {
    let dim = 1 + rng.next_range(2);
    let k = 1 + rng.next_range(3);
    let raw: Vec<f64> = (0..k).map(|_| 0.2 + rng.next_f64()).collect();
    let total: f64 = raw.iter().sum();
    let gm = GaussianMixture::new(
        raw.iter().map(|w| w / total).collect(),
        (0..k).map(|_| (0..dim).map(|_| 2.0 * (rng.next_f64() - 0.5)).collect()).collect(),
        (0..k).map(|_| 0.6 + 1.2 * rng.next_f64()).collect(),
    )
    .expect("valid mixture");
    let b0 = 0.05 + 0.1 * rng.next_f64();
    let b1 = 0.15 * rng.next_f64();
    let x: Vec<f64> = (0..dim).map(|_| 3.0 * (rng.next_f64() - 0.5)).collect();
    (gm, b0, b1, x)
}

/// |discrete decomposition(n) - continuous limit| decreases monotonically in
/// n and ends below the stated tolerance.
pub fn check_continuous_limit(config: &VerifyConfig) -> Result<CheckReport> {
    let mut rng = Rng::from_stream(config.seed, &[3]);
    let resolutions = [25usize, 50, 100, 200];
    let target_fraction = 0.4;
    let mut max_final = 0.0f64;
    let mut monotone = true;
    let mut worst_detail = String::new();
    for _ in 0..config.continuous_instances {
        let (gm, b0, b1, x) = random_continuous_instance(&mut rng);
        let beta = move |s: f64| b0 + b1 * s;
        let reference = mixture::tls_continuous(&gm, beta, &x, target_fraction, 1.0, 4096)?;
        let mut errors = Vec::with_capacity(resolutions.len());
        for &n in &resolutions {
            // Discrete schedule whose nodes sit exactly on the continuous
            // signal curve ᾱ(s) = exp(-∫β); β_t recovered from ratios.
            let alpha_bars: Vec<f64> = (1..=n)
                .map(|i| {
                    let s = i as f64 / n as f64;
                    (-(b0 * s + 0.5 * b1 * s * s)).exp()
                })
                .collect();
            let schedule = NoiseSchedule::from_alpha_bars(alpha_bars)?;
            let family = MarginalFamily::new(&gm, &schedule)?;
            let t_idx = (target_fraction * n as f64).round() as usize;
            let disc = family.tls_decomposed(&x, t_idx)?;
            errors.push(max_abs_diff(&disc, &reference));
        }
        for w in errors.windows(2) {
            if w[1] >= w[0] {
                monotone = false;
                worst_detail = format!("non-monotone error sequence {errors:?}");
            }
        }
        max_final = max_final.max(*errors.last().unwrap());
    }
    let threshold_abs = 1e-3;
    Ok(CheckReport {
        name: "continuous_limit",
        passed: monotone && max_final < threshold_abs,
        max_abs_error: max_final,
        max_rel_error: 0.0,
        threshold_abs,
        threshold_rel: 0.0,
        instances: config.continuous_instances,
        details: if monotone {
            format!("errors decrease over n in {{25,50,100,200}}; worst final {max_final:.3e}")
        } else {
            worst_detail
        },
    })
}

/// Tweedie's formula with the exact score equals the exact posterior mean.
pub fn check_tweedie(config: &VerifyConfig) -> Result<CheckReport> {
    let mut rng = Rng::from_stream(config.seed, &[4]);
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    for _ in 0..config.tweedie_instances {
        let (gm, schedule, x, t) = random_instance(&mut rng);
        let ab = schedule.alpha_bar(t);
        let exact = gm.posterior_mean_x0(&x, ab)?;
        let score = gm.perturbed(ab)?.score(&x)?;
        let tweedie: Vec<f64> =
            x.iter().zip(&score).map(|(&xv, &sv)| (xv + (1.0 - ab) * sv) / ab.sqrt()).collect();
        let abs = max_abs_diff(&exact, &tweedie);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / norm_inf(&exact).max(1e-12));
    }
    let (threshold_abs, threshold_rel) = (1e-8, 1e-8);
    Ok(CheckReport {
        name: "tweedie_exactness",
        passed: max_abs < threshold_abs,
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        threshold_abs,
        threshold_rel,
        instances: config.tweedie_instances,
        details: "Tweedie denoised estimate vs exact posterior mean".into(),
    })
}

/// Drift-energy bound: exactly zero at zero drift, exactly quadratic in the
/// drift scale under matched seeds.
pub fn check_drift_bound_scaling(config: &VerifyConfig) -> Result<CheckReport> {
    let gm = GaussianMixture::toy_two_wells();
    let schedule = NoiseSchedule::linear(50, 1e-3, 0.2)?;
    let zero = mixture::drift_energy_bound(
        &gm,
        &schedule,
        |x, _| vec![0.0; x.len()],
        config.drift_mc_samples,
        config.seed,
    )?;
    let b1 = mixture::drift_energy_bound(
        &gm,
        &schedule,
        |x, _| x.iter().map(|v| -0.01 * v).collect(),
        config.drift_mc_samples,
        config.seed,
    )?;
    let b2 = mixture::drift_energy_bound(
        &gm,
        &schedule,
        |x, _| x.iter().map(|v| -0.02 * v).collect(),
        config.drift_mc_samples,
        config.seed,
    )?;
    let max_abs = zero.abs().max((b2 - 4.0 * b1).abs()) + config.gamma_bias.abs();
    Ok(CheckReport {
        name: "drift_bound_scaling",
        passed: max_abs == 0.0 && b1 > 0.0 && b1.is_finite(),
        max_abs_error: max_abs,
        max_rel_error: 0.0,
        threshold_abs: 0.0,
        threshold_rel: 0.0,
        instances: 2,
        details: format!("bound(0) = {zero}, bound(v) = {b1:.6}, bound(2v) - 4 bound(v) = {:.3e}", b2 - 4.0 * b1),
    })
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn norm_inf(a: &[f64]) -> f64 {
    a.iter().map(|v| v.abs()).fold(0.0, f64::max)
}
