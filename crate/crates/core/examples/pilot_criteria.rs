//! Pilot for the corrupted-trend, few-step, escape-time, and multi-condition
//! experiments.

use taglab_core::guidance::*;
use taglab_core::linalg::Matrix;
use taglab_core::metrics::*;
use taglab_core::sampler::*;
use taglab_core::schedule::OmegaKind;
use taglab_core::{GaussianMixture, MarginalFamily, NoiseSchedule, Rng};

fn main() {
    let gm = GaussianMixture::toy_two_wells();
    let noisy = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
    let n = 512;
    let reference = Matrix::from_vec(4096, 2, gm.sample(4096, &mut Rng::new(99)));

    // --- Criterion 7: corrupted trend, sigma fixed, omega grid ---
    let src = ScoreSource::analytic(&gm, &noisy).unwrap();
    let tls = TlsSource::analytic(&gm, &noisy).unwrap();
    println!("== corrupted trend (sigma = 0.4, analytic score/TLS, fully noised schedule)");
    let mut omegas = Vec::new();
    let mut tgs = Vec::new();
    for omega0 in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
        let set = run_reverse(&src, &ReverseConfig {
            kind: SamplerKind::Ddpm,
            steps: full_step_indices(100),
            n_trajectories: n,
            seed: 3,
            corruption_sigma: 0.4,
            tag: Some(TagConfig { tls: &tls, omega_kind: OmegaKind::OneMinusAbar, omega0 }),
            drift: None,
            record_predicted_times: false,
        }).unwrap();
        let tg = time_gap(&set, &tls).unwrap();
        let w1 = sliced_w1(&set.terminal_states(), &reference, 64, 5).unwrap();
        println!("omega0={omega0}: TG = {tg:.2}, W1 = {w1:.3}");
        omegas.push(omega0);
        tgs.push(tg);
    }
    println!("spearman(omega, TG) = {:.3}", spearman(&omegas, &tgs).unwrap());

    // --- Criterion 8: few-step DDIM ---
    println!("== few-step (analytic score + TLS, fully noised)");
    for nfe in [1usize, 3, 5, 10, 50] {
        let steps = ddim_step_indices(100, nfe);
        let plain = run_reverse(&src, &ReverseConfig {
            kind: SamplerKind::Ddim, steps: steps.clone(), n_trajectories: n, seed: 4,
            corruption_sigma: 0.0, tag: None, drift: None, record_predicted_times: false,
        }).unwrap();
        let w1_plain = sliced_w1(&plain.terminal_states(), &reference, 64, 5).unwrap();
        let mut best = f64::INFINITY;
        let mut best_omega = 0.0;
        for omega0 in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let set = run_reverse(&src, &ReverseConfig {
                kind: SamplerKind::Ddim, steps: steps.clone(), n_trajectories: n, seed: 4,
                corruption_sigma: 0.0,
                tag: Some(TagConfig { tls: &tls, omega_kind: OmegaKind::SqrtOneMinusAbar, omega0 }),
                drift: None, record_predicted_times: false,
            }).unwrap();
            let w1 = sliced_w1(&set.terminal_states(), &reference, 64, 5).unwrap();
            if w1 < best { best = w1; best_omega = omega0; }
        }
        println!("nfe={nfe}: plain W1 = {w1_plain:.3}, best TAG W1 = {best:.3} @ omega0={best_omega}");
    }

    // --- Criterion 9: escape times ---
    println!("== escape study");
    let wide = GaussianMixture::new(
        vec![0.5, 0.5], vec![vec![-60.0], vec![60.0]], vec![100.0, 100.0],
    );
    let wide = match wide { Ok(g) => g, Err(e) => { println!("bad mixture: {e}"); return } };
    let esc_schedule = NoiseSchedule::from_betas(vec![1e-4, 0.9999]).unwrap();
    println!("escape marginal vars: t=1: {:.4}, t=2: {:.4}", 
        esc_schedule.alpha_bar(1) * 100.0 + 1.0 - esc_schedule.alpha_bar(1),
        esc_schedule.alpha_bar(2) * 100.0 + 1.0 - esc_schedule.alpha_bar(2));
    let family = MarginalFamily::new(&wide, &esc_schedule).unwrap();
    // epsilon = 1e-3 * peak of p_1.
    let peak = family.marginals[0].log_density(&[esc_schedule.alpha_bar(1).sqrt() * 60.0]).unwrap().exp();
    let eps = 1e-3 * peak;
    println!("peak {peak:.5e}, eps {eps:.3e}, p_1(0) = {:.3e}", family.marginals[0].log_density(&[0.0]).unwrap().exp());
    for (name, kind) in [("plain", LangevinKind::Plain), ("modified", LangevinKind::Modified)] {
        let rep = estimate_escape_time(kind, &family, 1, eps, &InitDist::Point(vec![0.0]), 0.05, 5000, 500, 77).unwrap();
        println!("{name}: mean = {:?}, median = {:?}, censored = {}", rep.mean_exit, rep.median_exit, rep.censored);
    }
    let plain_rep = estimate_escape_time(LangevinKind::Plain, &family, 1, eps, &InitDist::Point(vec![0.0]), 0.05, 5000, 500, 77).unwrap();
    let mod_rep = estimate_escape_time(LangevinKind::Modified, &family, 1, eps, &InitDist::Point(vec![0.0]), 0.05, 5000, 500, 77).unwrap();
    let a: Vec<f64> = mod_rep.exit_steps.iter().map(|&s| s as f64).collect();
    let b: Vec<f64> = plain_rep.exit_steps.iter().map(|&s| s as f64).collect();
    let mw = mann_whitney_one_sided(&a, &b).unwrap();
    println!("mann-whitney (modified < plain): z = {:.2}, p = {:.3e}", mw.z, mw.p_value);

    // --- Criterion 11: multi-condition ---
    println!("== multicond (standard schedule, analytic)");
    let schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let src2 = ScoreSource::analytic(&gm, &schedule).unwrap();
    let tls2 = TlsSource::analytic(&gm, &schedule).unwrap();
    let cond1 = ConditionSpec { property: PropertyFn::Coordinate { index: 0 }, target: vec![10.0], loss: LossKind::Absolute };
    let cond2 = ConditionSpec { property: PropertyFn::Coordinate { index: 1 }, target: vec![10.0], loss: LossKind::Absolute };
    let steps = full_step_indices(100);
    for (rho0, omega0) in [(1.0, 0.0), (1.0, 1.0), (2.0, 0.0), (2.0, 2.0), (4.0, 0.0), (4.0, 4.0), (8.0, 0.0), (8.0, 8.0)] {
        for variant in [MulticondVariant::SinglePredictor, MulticondVariant::UncondPredictor] {
            let strengths = MulticondStrengths {
                rho_kind: OmegaKind::SqrtOneMinusAbar, rho0,
                omega_kind: OmegaKind::SqrtOneMinusAbar, omega0,
                eta_sq: None, eta_tilde_sq: None,
            };
            let set = sample_multicond(variant, &src2, &tls2, &cond1, &cond2, &strengths, &steps, 256, 5).unwrap();
            let term = set.terminal_states();
            let mut hits = 0;
            for r in 0..term.rows {
                if (term.get(r, 0) - 10.0).abs() <= 3.0 && (term.get(r, 1) - 10.0).abs() <= 3.0 { hits += 1; }
            }
            println!("variant={variant:?} rho0={rho0} omega0={omega0}: joint satisfaction = {:.3}", hits as f64 / term.rows as f64);
        }
    }
}
