//! Analytic Gaussian-mixture oracle.
//!
//! Everything here is closed form: densities, scores, the exact Gaussian
//! convolution under the VP forward process, timestep posteriors and their
//! input gradients (time-linked scores), the posterior mean of the clean
//! point, and a Monte-Carlo drift-energy bound. Components are isotropic,
//! which keeps every perturbation and posterior in closed form.
//!
//! Densities are handled in log space throughout; posterior weights γ are
//! exp-normalized so ratios stay finite far from the modes.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;
use crate::schedule::{trapezoid, NoiseSchedule};
use serde::{Deserialize, Serialize};

const LOG_2PI: f64 = 1.8378770664093453;

/// Weighted mixture of isotropic Gaussians; covariance of component i is
/// `variances[i] · I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let gm = GaussianMixture { weights, means, variances };
        gm.validate()?;
        Ok(gm)
    }

    /// Single standard normal in `dim` dimensions.
    pub fn standard_normal(dim: usize) -> Self {
        GaussianMixture { weights: vec![1.0], means: vec![vec![0.0; dim]], variances: vec![1.0] }
    }

    /// The two-well benchmark: equal-weight unit-variance components at
    /// (10, 10) and (-10, -10).
    pub fn toy_two_wells() -> Self {
        GaussianMixture {
            weights: vec![0.5, 0.5],
            means: vec![vec![10.0, 10.0], vec![-10.0, -10.0]],
            variances: vec![1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.variances.len() != k {
            return Err(Error::InvalidParameter(
                "mixture needs matching, nonempty weights/means/variances".into(),
            ));
        }
        if self.weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidParameter("weights must be nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("weights sum to {total}, not 1")));
        }
        if self.variances.iter().any(|v| *v <= 0.0 || !v.is_finite()) {
            return Err(Error::InvalidParameter("variances must be strictly positive".into()));
        }
        let d = self.means[0].len();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::InvalidParameter("all component means must share dimension".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        Ok(())
    }

    /// Per-component `log(wᵢ) + log N(x; μᵢ, σᵢ² I)`; zero weights map to -∞.
    fn component_log_terms(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim() as f64;
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((&w, mu), &var)| {
                let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                let logw = if w > 0.0 { w.ln() } else { f64::NEG_INFINITY };
                logw - 0.5 * d * (LOG_2PI + var.ln()) - 0.5 * sq / var
            })
            .collect()
    }

    /// log Σᵢ wᵢ N(x; μᵢ, σᵢ² I), via log-sum-exp.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(log_sum_exp(&self.component_log_terms(x)))
    }

    /// Posterior responsibilities rᵢ(x) ∝ wᵢ N(x; μᵢ, σᵢ² I).
    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(exp_normalize(&self.component_log_terms(x)))
    }

    /// ∇ₓ log density = Σᵢ rᵢ(x) (μᵢ - x) / σᵢ².
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        let r = self.responsibilities(x)?;
        let mut g = vec![0.0; self.dim()];
        for ((ri, mu), var) in r.iter().zip(&self.means).zip(&self.variances) {
            for ((gj, &mj), &xj) in g.iter_mut().zip(mu).zip(x) {
                *gj += ri * (mj - xj) / var;
            }
        }
        Ok(g)
    }

    /// ∇²ₓ log density, exact:
    /// `Σᵢ rᵢ (gᵢ gᵢᵀ - I/σᵢ²) - g gᵀ` with `gᵢ = (μᵢ - x)/σᵢ²`, `g = Σ rᵢ gᵢ`.
    pub fn hessian_log_density(&self, x: &[f64]) -> Result<Matrix> {
        let r = self.responsibilities(x)?;
        let d = self.dim();
        let comp_grads: Vec<Vec<f64>> = self
            .means
            .iter()
            .zip(&self.variances)
            .map(|(mu, &var)| x.iter().zip(mu).map(|(&xj, &mj)| (mj - xj) / var).collect())
            .collect();
        let mut g = vec![0.0; d];
        for (ri, gi) in r.iter().zip(&comp_grads) {
            for (gj, &v) in g.iter_mut().zip(gi) {
                *gj += ri * v;
            }
        }
        let mut h = Matrix::zeros(d, d);
        for ((ri, gi), var) in r.iter().zip(&comp_grads).zip(&self.variances) {
            for a in 0..d {
                for b in 0..d {
                    let mut v = ri * gi[a] * gi[b];
                    if a == b {
                        v -= ri / var;
                    }
                    h.data[a * d + b] += v;
                }
            }
        }
        for a in 0..d {
            for b in 0..d {
                h.data[a * d + b] -= g[a] * g[b];
            }
        }
        Ok(h)
    }

    /// Exact marginal after the VP forward process at signal level ᾱ:
    /// component i becomes N(√ᾱ μᵢ, (ᾱ σᵢ² + 1 - ᾱ) I); weights unchanged.
    pub fn perturbed(&self, alpha_bar: f64) -> Result<GaussianMixture> {
        if !(0.0..=1.0).contains(&alpha_bar) {
            return Err(Error::InvalidParameter(format!(
                "alpha_bar must be in [0, 1], got {alpha_bar}"
            )));
        }
        let signal = alpha_bar.sqrt();
        Ok(GaussianMixture {
            weights: self.weights.clone(),
            means: self
                .means
                .iter()
                .map(|mu| mu.iter().map(|&m| signal * m).collect())
                .collect(),
            variances: self.variances.iter().map(|&v| alpha_bar * v + (1.0 - alpha_bar)).collect(),
        })
    }

    /// Exact E[x₀ | x_t] at signal level ᾱ: per-component Gaussian posterior
    /// means weighted by noisy-space responsibilities.
    pub fn posterior_mean_x0(&self, x_t: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
        if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "x0 is unidentifiable at alpha_bar = {alpha_bar}; need (0, 1]"
            )));
        }
        let noisy = self.perturbed(alpha_bar)?;
        let r = noisy.responsibilities(x_t)?;
        let signal = alpha_bar.sqrt();
        let mut out = vec![0.0; self.dim()];
        for ((ri, mu), &var0) in r.iter().zip(&self.means).zip(&self.variances) {
            // E[x₀ | x_t, component i] = μᵢ + √ᾱ σᵢ²/(ᾱ σᵢ² + 1 - ᾱ) (x_t - √ᾱ μᵢ)
            let gain = signal * var0 / (alpha_bar * var0 + 1.0 - alpha_bar);
            for ((oj, &mj), &xj) in out.iter_mut().zip(mu).zip(x_t) {
                *oj += ri * (mj + gain * (xj - signal * mj));
            }
        }
        Ok(out)
    }

    /// Draw one point; component chosen by weight, then an isotropic draw.
    pub fn sample_point(&self, rng: &mut Rng) -> Vec<f64> {
        let u = rng.next_f64();
        let mut acc = 0.0;
        let mut idx = self.n_components() - 1;
        for (i, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        let sd = self.variances[idx].sqrt();
        self.means[idx].iter().map(|&m| m + sd * rng.next_gaussian()).collect()
    }

    /// Draw `n` points, flattened row-major (n × dim).
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * self.dim());
        for _ in 0..n {
            out.extend(self.sample_point(rng));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("mixture serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let gm: GaussianMixture = serde_json::from_str(s)?;
        gm.validate()?;
        Ok(gm)
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + terms.iter().map(|&t| (t - m).exp()).sum::<f64>().ln()
}

fn exp_normalize(terms: &[f64]) -> Vec<f64> {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = terms.iter().map(|&t| (t - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Timestep posterior p(t | x) under a uniform prior over step indices,
/// together with the log marginals that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimePosterior {
    /// p(t | x) for t = 1..=T; nonnegative, sums to 1.
    pub probs: Vec<f64>,
    /// log p_t(x) for t = 1..=T.
    pub log_marginals: Vec<f64>,
}

impl TimePosterior {
    /// Argmax step index (1-based); ties break toward the smaller index.
    pub fn argmax_step(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best + 1
    }
}

/// The family of perturbed marginals p_t for t = 1..=T, precomputed once so
/// repeated posterior/TLS evaluations do not rebuild mixtures.
#[derive(Debug, Clone)]
pub struct MarginalFamily {
    pub marginals: Vec<GaussianMixture>,
}

impl MarginalFamily {
    pub fn new(gm0: &GaussianMixture, schedule: &NoiseSchedule) -> Result<Self> {
        let marginals = (1..=schedule.num_steps)
            .map(|t| gm0.perturbed(schedule.alpha_bar(t)))
            .collect::<Result<Vec<_>>>()?;
        Ok(MarginalFamily { marginals })
    }

    pub fn num_steps(&self) -> usize {
        self.marginals.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::IndexOutOfRange { index: t, max: self.num_steps() });
        }
        Ok(())
    }

    /// Marginal score ∇ log p_t(x).
    pub fn score(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_step(t)?;
        self.marginals[t - 1].score(x)
    }

    pub fn time_posterior(&self, x: &[f64]) -> Result<TimePosterior> {
        let log_marginals = self
            .marginals
            .iter()
            .map(|m| m.log_density(x))
            .collect::<Result<Vec<f64>>>()?;
        let probs = exp_normalize(&log_marginals);
        Ok(TimePosterior { probs, log_marginals })
    }

    /// TLS(x, t) = ∇ log p(t | x), in closed form: s_t - Σ_k γ_k s_k with
    /// γ_k = p_k / p_tot.
    pub fn tls_analytic(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_step(t)?;
        let gamma = self.time_posterior(x)?.probs;
        let scores: Vec<Vec<f64>> =
            self.marginals.iter().map(|m| m.score(x)).collect::<Result<_>>()?;
        let d = x.len();
        let mut out = scores[t - 1].clone();
        for k in 0..self.num_steps() {
            for j in 0..d {
                out[j] -= gamma[k] * scores[k][j];
            }
        }
        Ok(out)
    }

    /// The decomposition Σ_{k≠t} γ_k (s_t - s_k), evaluated literally term by
    /// term. Algebraically identical to [`Self::tls_analytic`].
    pub fn tls_decomposed(&self, x: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_step(t)?;
        let gamma = self.time_posterior(x)?.probs;
        let scores: Vec<Vec<f64>> =
            self.marginals.iter().map(|m| m.score(x)).collect::<Result<_>>()?;
        let d = x.len();
        let s_t = &scores[t - 1];
        let mut out = vec![0.0; d];
        for k in 0..self.num_steps() {
            if k == t - 1 {
                continue;
            }
            for j in 0..d {
                out[j] += gamma[k] * (s_t[j] - scores[k][j]);
            }
        }
        Ok(out)
    }

    /// Guidance-modified score at step k: s_k - Σᵢ γᵢ sᵢ with γᵢ = pᵢ/p_tot
    /// over all i (including k; the two γ conventions coincide since Σγ = 1).
    pub fn modified_score(&self, x: &[f64], k: usize) -> Result<Vec<f64>> {
        self.check_step(k)?;
        let gamma = self.time_posterior(x)?.probs;
        let scores: Vec<Vec<f64>> =
            self.marginals.iter().map(|m| m.score(x)).collect::<Result<_>>()?;
        let d = x.len();
        let mut out = scores[k - 1].clone();
        for i in 0..self.num_steps() {
            for j in 0..d {
                out[j] -= gamma[i] * scores[i][j];
            }
        }
        Ok(out)
    }
}

/// Convenience wrappers matching the one-shot call shape.
pub fn time_posterior(
    gm0: &GaussianMixture,
    schedule: &NoiseSchedule,
    x: &[f64],
) -> Result<TimePosterior> {
    MarginalFamily::new(gm0, schedule)?.time_posterior(x)
}

pub fn tls_analytic(
    gm0: &GaussianMixture,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    MarginalFamily::new(gm0, schedule)?.tls_analytic(x, t)
}

pub fn tls_decomposed(
    gm0: &GaussianMixture,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    MarginalFamily::new(gm0, schedule)?.tls_decomposed(x, t)
}

pub fn modified_score(
    gm0: &GaussianMixture,
    schedule: &NoiseSchedule,
    x: &[f64],
    k: usize,
) -> Result<Vec<f64>> {
    MarginalFamily::new(gm0, schedule)?.modified_score(x, k)
}

/// Continuous-time TLS (the n → ∞ limit of the discrete decomposition):
/// `∇ log p_t(x) - ∫ γ_s ∇ log p_s(x) ds` over s ∈ [0, t_end], with
/// `γ_s = p_s(x)/∫ p_k(x) dk` and ᾱ(s) = exp(-∫₀ˢ β) the VP signal level.
/// Both integrals use the trapezoid rule on `panels` uniform panels.
pub fn tls_continuous(
    gm0: &GaussianMixture,
    beta_fn: impl Fn(f64) -> f64,
    x: &[f64],
    t: f64,
    t_end: f64,
    panels: usize,
) -> Result<Vec<f64>> {
    if panels < 2 {
        return Err(Error::InvalidParameter("quadrature needs at least 2 panels".into()));
    }
    if !(0.0 <= t && t <= t_end) {
        return Err(Error::InvalidParameter(format!(
            "target time {t} outside quadrature interval [0, {t_end}]"
        )));
    }
    let d = x.len();
    let h = t_end / panels as f64;

    // Cumulative ∫β at the nodes, incrementally trapezoided.
    let mut beta_vals = Vec::with_capacity(panels + 1);
    for j in 0..=panels {
        beta_vals.push(beta_fn(j as f64 * h));
    }
    let mut cum = Vec::with_capacity(panels + 1);
    let mut acc = 0.0;
    cum.push(0.0);
    for j in 1..=panels {
        acc += 0.5 * (beta_vals[j - 1] + beta_vals[j]) * h;
        cum.push(acc);
    }

    let mut log_ps = Vec::with_capacity(panels + 1);
    let mut scores = Vec::with_capacity(panels + 1);
    for &c in &cum {
        let marginal = gm0.perturbed((-c).exp())?;
        log_ps.push(marginal.log_density(x)?);
        scores.push(marginal.score(x)?);
    }

    // Trapezoid weights, with densities exp-shifted by their max.
    let m = log_ps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    let mut numer = vec![0.0; d];
    for j in 0..=panels {
        let w = if j == 0 || j == panels { 0.5 * h } else { h };
        let p = (log_ps[j] - m).exp();
        denom += w * p;
        for i in 0..d {
            numer[i] += w * p * scores[j][i];
        }
    }

    let target_cum = trapezoid(&beta_fn, t, panels.max((panels as f64 * t / t_end) as usize));
    let target = gm0.perturbed((-target_cum).exp())?;
    let mut out = target.score(x)?;
    for i in 0..d {
        out[i] -= numer[i] / denom;
    }
    Ok(out)
}

/// Monte-Carlo estimate of the drift-energy bound
/// `1/2 ∫∫ g(t)⁻² p_t(x) ‖v(x, t)‖² dx dt` with g(t)² = β_t under the VP
/// process: exact sampling from each perturbed marginal, trapezoid over the
/// step axis. Deterministic given the seed.
pub fn drift_energy_bound(
    gm0: &GaussianMixture,
    schedule: &NoiseSchedule,
    drift_fn: impl Fn(&[f64], usize) -> Vec<f64>,
    n_mc: usize,
    seed: u64,
) -> Result<f64> {
    if n_mc == 0 {
        return Err(Error::InvalidParameter("n_mc must be >= 1".into()));
    }
    let t_max = schedule.num_steps;
    let mut per_step = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let marginal = gm0.perturbed(schedule.alpha_bar(t))?;
        let mut rng = Rng::from_stream(seed, &[0x4452_4946_54, t as u64]);
        let mut mean_sq = 0.0;
        for _ in 0..n_mc {
            let x = marginal.sample_point(&mut rng);
            let v = drift_fn(&x, t);
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite { context: "drift" });
            }
            mean_sq += v.iter().map(|c| c * c).sum::<f64>();
        }
        per_step.push(mean_sq / n_mc as f64 / schedule.beta(t));
    }
    // Trapezoid over t = 1..=T with unit spacing (a single step contributes
    // its full value).
    let integral = if t_max == 1 {
        per_step[0]
    } else {
        let mut acc = 0.5 * (per_step[0] + per_step[t_max - 1]);
        for v in &per_step[1..t_max - 1] {
            acc += v;
        }
        acc
    };
    Ok(0.5 * integral)
}
