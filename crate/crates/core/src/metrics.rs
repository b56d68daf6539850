//! Quantitative evaluation: time gap, sliced Wasserstein-1, mixture negative
//! log-likelihood, rank correlation, and the one-sided Mann–Whitney test
//! used by the escape study. Everything is deterministic given its seed.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mixture::GaussianMixture;
use crate::rng::Rng;
use crate::sampler::{TlsSource, TrajectorySet};
use serde::{Deserialize, Serialize};

/// Hard cap on points per set in the sliced-W1 computation; larger sets are
/// subsampled (seeded, without replacement) before projecting.
pub const W1_SUBSAMPLE_CAP: usize = 2048;

/// Default number of random projections.
pub const W1_DEFAULT_PROJECTIONS: usize = 64;

/// Sliced Wasserstein-1 distance between two sample sets: the average over
/// random unit projections of the exact 1D W1 (mean absolute difference of
/// sorted projections). Subsample streams are keyed by set size, so the
/// distance is exactly symmetric and exactly zero on identical sets.
pub fn sliced_w1(a: &Matrix, b: &Matrix, n_projections: usize, seed: u64) -> Result<f64> {
    if a.cols != b.cols {
        return Err(Error::DimensionMismatch { expected: a.cols, got: b.cols });
    }
    if a.rows == 0 || b.rows == 0 || n_projections == 0 {
        return Err(Error::InvalidParameter("sliced W1 needs nonempty sets and projections".into()));
    }
    let d = a.cols;
    let m = a.rows.min(b.rows).min(W1_SUBSAMPLE_CAP);
    let idx_a = subsample_indices(a.rows, m, seed);
    let idx_b = subsample_indices(b.rows, m, seed);

    let mut rng = Rng::from_stream(seed, &[0x5052_4f4a]);
    let mut total = 0.0;
    let mut proj_a = vec![0.0; m];
    let mut proj_b = vec![0.0; m];
    for _ in 0..n_projections {
        let mut dir = rng.gaussian_vec(d);
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            dir[0] = 1.0;
        } else {
            dir.iter_mut().for_each(|v| *v /= norm);
        }
        for (slot, &ri) in proj_a.iter_mut().zip(&idx_a) {
            *slot = dot(a.row(ri), &dir);
        }
        for (slot, &ri) in proj_b.iter_mut().zip(&idx_b) {
            *slot = dot(b.row(ri), &dir);
        }
        proj_a.sort_unstable_by(f64::total_cmp);
        proj_b.sort_unstable_by(f64::total_cmp);
        let w1: f64 =
            proj_a.iter().zip(&proj_b).map(|(x, y)| (x - y).abs()).sum::<f64>() / m as f64;
        total += w1;
    }
    Ok(total / n_projections as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// First `m` entries of a seeded partial Fisher–Yates shuffle of 0..n. The
/// stream is keyed by n only, so equal-sized sets subsample identically.
fn subsample_indices(n: usize, m: usize, seed: u64) -> Vec<usize> {
    if m >= n {
        return (0..n).collect();
    }
    let mut rng = Rng::from_stream(seed, &[0x5355_4253, n as u64]);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = i + rng.next_range(n - i);
        idx.swap(i, j);
    }
    idx.truncate(m);
    idx
}

/// Mean |predicted step − true step| over every recorded state with step
/// index ≥ 1, averaged per trajectory and then over trajectories. The
/// predictor is queried per recorded step on the whole batch.
pub fn time_gap_with(
    set: &TrajectorySet,
    mut predictor: impl FnMut(&Matrix) -> Result<Vec<usize>>,
) -> Result<f64> {
    if set.trajectories.is_empty() {
        return Err(Error::InvalidParameter("time gap of an empty trajectory set".into()));
    }
    let n = set.n();
    let mut per_traj = vec![0.0; n];
    let mut counted = 0usize;
    for (j, &step) in set.step_indices.iter().enumerate() {
        if step == 0 {
            continue;
        }
        counted += 1;
        let mut states = Matrix::zeros(n, set.dim);
        for (r, traj) in set.trajectories.iter().enumerate() {
            states.row_mut(r).copy_from_slice(traj.state(j));
        }
        let predicted = predictor(&states)?;
        for (r, &p) in predicted.iter().enumerate() {
            per_traj[r] += (p as f64 - step as f64).abs();
        }
    }
    if counted == 0 {
        return Err(Error::InvalidParameter("trajectory set has no positive-step states".into()));
    }
    Ok(per_traj.iter().map(|g| g / counted as f64).sum::<f64>() / n as f64)
}

/// Time gap with a timestep-posterior or trained-predictor source.
pub fn time_gap(set: &TrajectorySet, source: &TlsSource) -> Result<f64> {
    time_gap_with(set, |xs| source.predicted_steps_batch(xs))
}

/// Per-step mean |predicted − t| profile over the recorded states
/// (step index, mean gap), descending step order.
pub fn time_gap_profile(set: &TrajectorySet, source: &TlsSource) -> Result<Vec<(usize, f64)>> {
    let n = set.n();
    let mut out = Vec::new();
    for (j, &step) in set.step_indices.iter().enumerate() {
        if step == 0 {
            continue;
        }
        let mut states = Matrix::zeros(n, set.dim);
        for (r, traj) in set.trajectories.iter().enumerate() {
            states.row_mut(r).copy_from_slice(traj.state(j));
        }
        let predicted = source.predicted_steps_batch(&states)?;
        let gap = predicted.iter().map(|&p| (p as f64 - step as f64).abs()).sum::<f64>() / n as f64;
        out.push((step, gap));
    }
    Ok(out)
}

/// Mean negative log-likelihood of samples under a mixture; lower is better.
pub fn mixture_nll(gm: &GaussianMixture, samples: &Matrix) -> Result<f64> {
    if samples.rows == 0 {
        return Err(Error::InvalidParameter("NLL of an empty sample set".into()));
    }
    let mut total = 0.0;
    for r in 0..samples.rows {
        total -= gm.log_density(samples.row(r))?;
    }
    Ok(total / samples.rows as f64)
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidParameter("spearman needs two equal-length series".into()));
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for i in 0..x.len() {
        let a = rx[i] - mean;
        let b = ry[i] - mean;
        num += a * b;
        dx += a * a;
        dy += b * b;
    }
    if dx == 0.0 || dy == 0.0 {
        return Err(Error::InvalidParameter("spearman undefined for constant series".into()));
    }
    Ok(num / (dx * dy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// One-sided Mann–Whitney U test for H1: samples in `a` are stochastically
/// smaller than samples in `b`. Normal approximation with tie correction and
/// continuity correction; fine at the few-hundred-trial scale used here.
pub fn mann_whitney_one_sided(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    let (na, nb) = (a.len(), b.len());
    if na == 0 || nb == 0 {
        return Err(Error::InvalidParameter("mann-whitney needs nonempty samples".into()));
    }
    let mut all: Vec<(f64, bool)> = a.iter().map(|&v| (v, true)).collect();
    all.extend(b.iter().map(|&v| (v, false)));
    all.sort_by(|x, y| x.0.total_cmp(&y.0));

    let n = na + nb;
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let ties = (j - i + 1) as f64;
        if ties > 1.0 {
            tie_term += ties * ties * ties - ties;
        }
        for item in &all[i..=j] {
            if item.1 {
                rank_sum_a += avg_rank;
            }
        }
        i = j + 1;
    }

    let u_a = rank_sum_a - (na * (na + 1)) as f64 / 2.0;
    let mean_u = (na * nb) as f64 / 2.0;
    let nf = n as f64;
    let var_u = (na * nb) as f64 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if var_u <= 0.0 {
        return Err(Error::InvalidParameter("mann-whitney variance degenerate (all ties)".into()));
    }
    let z = (u_a - mean_u + 0.5) / var_u.sqrt();
    Ok(MannWhitney { u_statistic: u_a, z, p_value: normal_cdf(z) })
}

/// Mann–Whitney result for H1: a < b.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MannWhitney {
    pub u_statistic: f64,
    pub z: f64,
    /// P(U ≤ observed) under H0.
    pub p_value: f64,
}

/// Standard normal CDF via the Abramowitz–Stegun 7.1.26 erf approximation
/// (absolute error < 1.5e-7, ample for the p ≈ 0.05 decisions made here).
pub fn normal_cdf(z: f64) -> f64 {
    let x = z / std::f64::consts::SQRT_2;
    0.5 * (1.0 + erf_approx(x))
}

fn erf_approx(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// One row of the experiment ledger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: String,
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_gap_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sliced_w1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_gap_profile: Option<Vec<(usize, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{sample_plain, ScoreSource, SamplerKind};
    use crate::schedule::NoiseSchedule;

    #[test]
    fn w1_identical_sets_zero() {
        let mut rng = Rng::new(5);
        let a = Matrix::from_vec(100, 2, rng.gaussian_vec(200));
        assert_eq!(sliced_w1(&a, &a, 16, 3).unwrap(), 0.0);
    }

    #[test]
    fn w1_point_masses() {
        let a = Matrix::from_vec(50, 1, vec![0.0; 50]);
        let b = Matrix::from_vec(50, 1, vec![2.5; 50]);
        let d = sliced_w1(&a, &b, 8, 1).unwrap();
        assert!((d - 2.5).abs() < 1e-12, "got {d}");
    }

    #[test]
    fn w1_pseudometric_properties() {
        let mut rng = Rng::new(9);
        let a = Matrix::from_vec(64, 2, rng.gaussian_vec(128));
        let b = Matrix::from_vec(64, 2, rng.gaussian_vec(128).iter().map(|v| v + 1.0).collect());
        let c = Matrix::from_vec(64, 2, rng.gaussian_vec(128).iter().map(|v| v * 2.0).collect());
        let dab = sliced_w1(&a, &b, 32, 7).unwrap();
        let dba = sliced_w1(&b, &a, 32, 7).unwrap();
        assert_eq!(dab, dba);
        let dac = sliced_w1(&a, &c, 32, 7).unwrap();
        let dbc = sliced_w1(&b, &c, 32, 7).unwrap();
        assert!(dac <= dab + dbc + 1e-12);
    }

    #[test]
    fn w1_dimension_mismatch() {
        let a = Matrix::zeros(4, 2);
        let b = Matrix::zeros(4, 3);
        assert!(sliced_w1(&a, &b, 4, 0).is_err());
    }

    #[test]
    fn toy_mixture_self_distance_small() {
        let gm = GaussianMixture::toy_two_wells();
        let a = Matrix::from_vec(10_000, 2, gm.sample(10_000, &mut Rng::new(1)));
        let b = Matrix::from_vec(10_000, 2, gm.sample(10_000, &mut Rng::new(2)));
        let d = sliced_w1(&a, &b, W1_DEFAULT_PROJECTIONS, 3).unwrap();
        assert!(d < 0.5, "self-distance {d}");
    }

    fn tiny_set() -> TrajectorySet {
        let gm = GaussianMixture::standard_normal(2);
        let schedule = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        let src = ScoreSource::analytic(&gm, &schedule).unwrap();
        sample_plain(&src, SamplerKind::Ddpm, 3, 11).unwrap()
    }

    #[test]
    fn time_gap_oracle_and_constant_predictor() {
        let set = tiny_set();
        // Oracle that always answers the true step: gap 0.
        let steps: Vec<usize> = set.step_indices.iter().filter(|&&s| s > 0).cloned().collect();
        let mut call = 0usize;
        let gap = time_gap_with(&set, |xs| {
            let t = steps[call];
            call += 1;
            Ok(vec![t; xs.rows])
        })
        .unwrap();
        assert_eq!(gap, 0.0);

        // Constant predictor stuck at T = 100 over t = 1..=100: mean 49.5.
        let gap = time_gap_with(&set, |xs| Ok(vec![100; xs.rows])).unwrap();
        assert!((gap - 49.5).abs() < 1e-12, "got {gap}");
    }

    #[test]
    fn time_gap_invariant_to_trajectory_order() {
        let mut set = tiny_set();
        let gm = GaussianMixture::standard_normal(2);
        let schedule = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
        let tls = TlsSource::analytic(&gm, &schedule).unwrap();
        let g1 = time_gap(&set, &tls).unwrap();
        set.trajectories.reverse();
        let g2 = time_gap(&set, &tls).unwrap();
        assert!((g1 - g2).abs() < 1e-12);
    }

    #[test]
    fn nll_cases() {
        let gm = GaussianMixture::standard_normal(1);
        let zeros = Matrix::zeros(10, 1);
        let nll = mixture_nll(&gm, &zeros).unwrap();
        assert!((nll - 0.9189385332046727).abs() < 1e-12);

        // Samples far from the mixture score much worse than matched samples.
        let far = GaussianMixture::new(vec![1.0], vec![vec![50.0]], vec![1.0]).unwrap();
        let mut rng = Rng::new(4);
        let samples = Matrix::from_vec(500, 1, rng.gaussian_vec(500));
        let matched = mixture_nll(&gm, &samples).unwrap();
        let mismatched = mixture_nll(&far, &samples).unwrap();
        assert!(mismatched > matched + 10.0);

        // Self-consistency under resampling.
        let s1 = Matrix::from_vec(4000, 1, gm.sample(4000, &mut Rng::new(7)));
        let s2 = Matrix::from_vec(4000, 1, gm.sample(4000, &mut Rng::new(8)));
        let n1 = mixture_nll(&gm, &s1).unwrap();
        let n2 = mixture_nll(&gm, &s2).unwrap();
        assert!((n1 - n2).abs() < 0.08, "{n1} vs {n2}");
    }

    #[test]
    fn spearman_directions() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let inc = [2.0, 4.0, 5.0, 7.0, 11.0];
        let dec = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&x, &inc).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &dec).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&x, &[1.0, 1.0, 1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn mann_whitney_detects_shift() {
        let mut rng = Rng::new(10);
        let a: Vec<f64> = (0..200).map(|_| rng.next_gaussian()).collect();
        let b: Vec<f64> = (0..200).map(|_| rng.next_gaussian() + 1.0).collect();
        let mw = mann_whitney_one_sided(&a, &b).unwrap();
        assert!(mw.p_value < 1e-6, "p {}", mw.p_value);
        // Reversed direction: p near 1.
        let mw_rev = mann_whitney_one_sided(&b, &a).unwrap();
        assert!(mw_rev.p_value > 0.999);
        // Same distribution: p not extreme.
        let c: Vec<f64> = (0..200).map(|_| rng.next_gaussian()).collect();
        let d: Vec<f64> = (0..200).map(|_| rng.next_gaussian()).collect();
        let mw_null = mann_whitney_one_sided(&c, &d).unwrap();
        assert!(mw_null.p_value > 0.01 && mw_null.p_value < 0.99);
    }

    #[test]
    fn normal_cdf_pinned() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-9);
        assert!((normal_cdf(1.6448536269514722) - 0.95).abs() < 1e-6);
        assert!((normal_cdf(-1.96) - 0.024997895148220435).abs() < 1e-6);
    }
}
