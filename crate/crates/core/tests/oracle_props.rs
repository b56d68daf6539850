//! Randomized property tests for the oracle identities and serialization
//! formats, plus the larger sampler self-consistency runs that do not
//! belong in unit tests.

use proptest::prelude::*;
use taglab_core::linalg::Matrix;
use taglab_core::metrics::{sliced_w1, W1_DEFAULT_PROJECTIONS};
use taglab_core::sampler::{sample_plain, SamplerKind, ScoreSource, TlsSource};
use taglab_core::schedule::{eps_to_score, score_to_eps};
use taglab_core::{GaussianMixture, MarginalFamily, NoiseSchedule, Rng};

fn small_mixture() -> impl Strategy<Value = GaussianMixture> {
    (1usize..4, 1usize..3).prop_flat_map(|(k, dim)| {
        (
            proptest::collection::vec(0.1f64..1.0, k),
            proptest::collection::vec(proptest::collection::vec(-4.0f64..4.0, dim), k),
            proptest::collection::vec(0.3f64..2.5, k),
        )
            .prop_map(|(raw_w, means, vars)| {
                let total: f64 = raw_w.iter().sum();
                GaussianMixture::new(
                    raw_w.iter().map(|w| w / total).collect(),
                    means,
                    vars,
                )
                .unwrap()
            })
    })
}

fn small_schedule() -> impl Strategy<Value = NoiseSchedule> {
    proptest::collection::vec(0.02f64..0.4, 1..7)
        .prop_map(|betas| NoiseSchedule::from_betas(betas).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // ε ↔ score conversion is an exact round trip.
    #[test]
    fn eps_score_round_trip(
        eps in proptest::collection::vec(-5.0f64..5.0, 1..4),
        alpha_bar in 0.0f64..0.999,
    ) {
        let back = score_to_eps(&eps_to_score(&eps, alpha_bar).unwrap(), alpha_bar).unwrap();
        for (a, b) in eps.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    // The decomposition routes agree and the posterior normalizes.
    #[test]
    fn tls_routes_agree(
        gm in small_mixture(),
        schedule in small_schedule(),
        coords in proptest::collection::vec(-5.0f64..5.0, 2),
        t_raw in 0usize..64,
    ) {
        let x = &coords[..gm.dim().min(coords.len())];
        if x.len() != gm.dim() { return Ok(()); }
        let family = MarginalFamily::new(&gm, &schedule).unwrap();
        let t = 1 + t_raw % schedule.num_steps;
        let tp = family.time_posterior(x).unwrap();
        let total: f64 = tp.probs.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
        let a = family.tls_analytic(x, t).unwrap();
        let d = family.tls_decomposed(x, t).unwrap();
        let m = family.modified_score(x, t).unwrap();
        for i in 0..x.len() {
            prop_assert!((a[i] - d[i]).abs() < 1e-10);
            prop_assert!((m[i] - d[i]).abs() < 1e-10);
        }
    }

    // Serialization formats reproduce their values exactly.
    #[test]
    fn schedule_json_round_trip(schedule in small_schedule()) {
        let back = NoiseSchedule::from_json(&schedule.to_json()).unwrap();
        prop_assert_eq!(schedule, back);
    }

    #[test]
    fn mixture_json_round_trip(gm in small_mixture()) {
        let back = GaussianMixture::from_json(&gm.to_json()).unwrap();
        prop_assert_eq!(gm, back);
    }

    // Sliced W1 is symmetric and zero on identical sets.
    #[test]
    fn w1_symmetry(seed in 0u64..1000, n in 8usize..64) {
        let mut rng = Rng::new(seed);
        let a = Matrix::from_vec(n, 2, rng.gaussian_vec(2 * n));
        let b = Matrix::from_vec(n, 2, rng.gaussian_vec(2 * n));
        let ab = sliced_w1(&a, &b, 8, 3).unwrap();
        let ba = sliced_w1(&b, &a, 8, 3).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(sliced_w1(&a, &a, 8, 3).unwrap(), 0.0);
    }
}

// The exact-score chain on the fully noised schedule reproduces the data
// distribution: the self-consistency baseline for every corruption study.
#[test]
fn exact_chain_recovers_data_distribution() {
    let gm = GaussianMixture::toy_two_wells();
    let schedule = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
    let src = ScoreSource::analytic(&gm, &schedule).unwrap();
    let set = sample_plain(&src, SamplerKind::Ddpm, 10_000, 42).unwrap();
    let fresh = Matrix::from_vec(10_000, 2, gm.sample(10_000, &mut Rng::new(43)));
    let w1 = sliced_w1(&set.terminal_states(), &fresh, W1_DEFAULT_PROJECTIONS, 9).unwrap();
    assert!(w1 < 0.5, "chain-vs-data sliced W1 {w1:.3}, expected < 0.5");
}

// Forward-sample time gap grows toward the final steps: on the fully noised
// schedule the late marginals all converge to N(0, I), so the posterior is
// sharp early and flat near T.
#[test]
fn time_gap_profile_grows_with_step() {
    let gm = GaussianMixture::toy_two_wells();
    let schedule = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
    let family = MarginalFamily::new(&gm, &schedule).unwrap();
    let mut rng = Rng::new(6);
    let n = 100;
    let mut early = 0.0;
    let mut late = 0.0;
    for t in 1..=100usize {
        let mut acc = 0.0;
        for _ in 0..n {
            let x0 = gm.sample_point(&mut rng);
            let x = schedule.forward_perturb(&x0, t, &mut rng).unwrap();
            let predicted = family.time_posterior(&x).unwrap().argmax_step();
            acc += (predicted as f64 - t as f64).abs();
        }
        let gap = acc / n as f64;
        if t <= 25 {
            early += gap / 25.0;
        }
        if t > 75 {
            late += gap / 25.0;
        }
    }
    assert!(
        early < late,
        "early-step gap {early:.2} should be below late-step gap {late:.2}"
    );
    assert!(early < 6.0, "early-step gap {early:.2} should be small");
}

// Conditioning a mixture on an isotropic Gaussian likelihood keeps it a
// mixture; used to compare samplers against the exact joint conditional.
fn condition(gm: &GaussianMixture, c: &[f64], s2: f64) -> GaussianMixture {
    let d = gm.dim() as f64;
    let mut log_w = Vec::new();
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for i in 0..gm.n_components() {
        let v = gm.variances[i];
        let fused = 1.0 / (1.0 / v + 1.0 / s2);
        means.push(
            gm.means[i]
                .iter()
                .zip(c)
                .map(|(&m, &cv)| fused * (m / v + cv / s2))
                .collect::<Vec<f64>>(),
        );
        vars.push(fused);
        let dist2: f64 = gm.means[i].iter().zip(c).map(|(&m, &cv)| (m - cv) * (m - cv)).sum();
        log_w.push(
            gm.weights[i].max(1e-300).ln()
                - 0.5 * d * (2.0 * std::f64::consts::PI * (v + s2)).ln()
                - 0.5 * dist2 / (v + s2),
        );
    }
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = log_w.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = raw.iter().sum();
    GaussianMixture::new(raw.iter().map(|w| w / total).collect(), means, vars).unwrap()
}

// Summing two single-condition scores is not the joint conditional score:
// the summed-score sampler misses the exact joint by far more than the
// exact-conditional sampler's own distance to fresh joint draws.
#[test]
fn naive_score_sum_is_not_the_joint_conditional() {
    let gm = GaussianMixture::new(
        vec![0.55, 0.35, 0.10],
        vec![vec![8.0, 0.0], vec![0.0, 8.0], vec![8.0, 8.0]],
        vec![2.0, 2.0, 2.0],
    )
    .unwrap();
    let c1 = vec![8.0, 4.0];
    let c2 = vec![4.0, 8.0];
    let s2 = 4.0;
    let joint = condition(&condition(&gm, &c1, s2), &c2, s2);
    let schedule = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
    let n = 3000;
    let fresh = Matrix::from_vec(n, 2, joint.sample(n, &mut Rng::new(111)));

    let src_joint = ScoreSource::analytic(&joint, &schedule).unwrap();
    let exact_set = sample_plain(&src_joint, SamplerKind::Ddpm, n, 7).unwrap();
    let d_exact = sliced_w1(&exact_set.terminal_states(), &fresh, 64, 9).unwrap();

    // Summed-score reverse chain, written out directly.
    let fam_1 = MarginalFamily::new(&condition(&gm, &c1, s2), &schedule).unwrap();
    let fam_2 = MarginalFamily::new(&condition(&gm, &c2, s2), &schedule).unwrap();
    let mut terminal = Matrix::zeros(n, 2);
    for i in 0..n {
        let mut rng = Rng::from_stream(7, &[0x4e41, i as u64]);
        let mut x: Vec<f64> = (0..2).map(|_| rng.next_gaussian()).collect();
        for t in (1..=100usize).rev() {
            let beta = schedule.beta(t);
            let s1 = fam_1.score(&x, t).unwrap();
            let s2v = fam_2.score(&x, t).unwrap();
            let inv = 1.0 / (1.0 - beta).sqrt();
            let sd = beta.sqrt();
            for j in 0..2 {
                x[j] = (x[j] + beta * (s1[j] + s2v[j])) * inv + sd * rng.next_gaussian();
            }
        }
        terminal.row_mut(i).copy_from_slice(&x);
    }
    let d_naive = sliced_w1(&terminal, &fresh, 64, 9).unwrap();
    assert!(
        d_naive > 3.0 * d_exact,
        "naive distance {d_naive:.4} vs exact self-distance {d_exact:.4}: ratio {:.2} should exceed 3",
        d_naive / d_exact
    );
}

// Analytic score source agrees with the perturbed-mixture score everywhere.
#[test]
fn analytic_score_source_spot_check() {
    let gm = GaussianMixture::toy_two_wells();
    let schedule = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
    let src = ScoreSource::analytic(&gm, &schedule).unwrap();
    let mut rng = Rng::new(14);
    for t in 1..=20usize {
        let marginal = gm.perturbed(schedule.alpha_bar(t)).unwrap();
        for _ in 0..5 {
            let x: Vec<f64> = (0..2).map(|_| 20.0 * (rng.next_f64() - 0.5)).collect();
            let a = src.score(&x, t).unwrap();
            let b = marginal.score(&x).unwrap();
            assert_eq!(a, b);
        }
    }
}

// Predicted-step recording matches the metric's own recomputation.
#[test]
fn recorded_predicted_times_match_recomputation() {
    let gm = GaussianMixture::toy_two_wells();
    let schedule = NoiseSchedule::linear(25, 1e-3, 0.2).unwrap();
    let src = ScoreSource::analytic(&gm, &schedule).unwrap();
    let tls = TlsSource::analytic(&gm, &schedule).unwrap();
    let set = taglab_core::sampler::run_reverse(
        &src,
        &taglab_core::sampler::ReverseConfig {
            kind: SamplerKind::Ddpm,
            steps: taglab_core::sampler::full_step_indices(25),
            n_trajectories: 4,
            seed: 5,
            corruption_sigma: 0.0,
            tag: Some(taglab_core::sampler::TagConfig {
                tls: &tls,
                omega_kind: taglab_core::OmegaKind::SqrtOneMinusAbar,
                omega0: 0.5,
            }),
            drift: None,
            record_predicted_times: true,
        },
    )
    .unwrap();
    for traj in &set.trajectories {
        assert_eq!(traj.predicted_times.len(), 25);
        for (j, &predicted) in traj.predicted_times.iter().enumerate() {
            let state = traj.state(j + 1);
            let expect = tls.predicted_steps_batch(&Matrix::from_vec(1, 2, state.to_vec())).unwrap()[0];
            assert_eq!(predicted, expect);
        }
    }
}
