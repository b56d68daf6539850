//! Predictor quality and the full criterion-6 path on the standard schedule.

use std::time::Instant;
use taglab_core::linalg::Matrix;
use taglab_core::metrics::*;
use taglab_core::net::*;
use taglab_core::sampler::*;
use taglab_core::schedule::OmegaKind;
use taglab_core::{GaussianMixture, NoiseSchedule, Rng};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let score_epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1200);
    let pred_epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(500);
    let width: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);

    let gm = GaussianMixture::toy_two_wells();
    let schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let data = Matrix::from_vec(40_000, 2, gm.sample(40_000, &mut Rng::new(7)));

    let t0 = Instant::now();
    let cfg_s = TrainConfig { epochs: score_epochs, learning_rate: 1e-3, ..Default::default() };
    let score_net = train_score_model(&data, &schedule, &[width, width], &cfg_s, 11).unwrap();
    println!("score {score_epochs}ep/{width}w: {:.0}s, final loss {:.4}",
        t0.elapsed().as_secs_f64(), score_net.loss_history.last().unwrap());

    // Cosine on grid near modes, per the derived oracle.
    let src_learned = ScoreSource::learned(&score_net.mlp, &schedule);
    let mut cos_sum = 0.0; let mut count = 0;
    for t in [1usize, 10, 30, 60, 90] {
        let marginal = gm.perturbed(schedule.alpha_bar(t)).unwrap();
        for i in -2..=2 { for j in -2..=2 { for center in [(10.0, 10.0), (-10.0, -10.0)] {
            let ab = schedule.alpha_bar(t).sqrt();
            let x = vec![center.0 * ab + i as f64, center.1 * ab + j as f64];
            let exact = marginal.score(&x).unwrap();
            let learned = src_learned.score(&x, t).unwrap();
            let dot: f64 = exact.iter().zip(&learned).map(|(a, b)| a * b).sum();
            let na: f64 = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = learned.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na > 1e-9 && nb > 1e-9 { cos_sum += dot / (na * nb); count += 1; }
        }}}
    }
    println!("score cosine: {:.4}", cos_sum / count as f64);

    let t0 = Instant::now();
    let cfg_p = TrainConfig { epochs: pred_epochs, learning_rate: 1e-3, ..Default::default() };
    let pred = train_time_predictor(&data, &schedule, &[width, width, width, width], &cfg_p, 13).unwrap();
    println!("predictor {pred_epochs}ep/{width}w: {:.0}s, final loss {:.4}",
        t0.elapsed().as_secs_f64(), pred.loss_history.last().unwrap());

    // Predictor sanity: time-gap on forward samples vs 49.5 baseline; clean
    // points classified to small t.
    let probe = Matrix::from_vec(512, 2, gm.sample(512, &mut Rng::new(21)));
    let mut fwd_gap = 0.0;
    let mut rng = Rng::new(31);
    for t in 1..=100 {
        let ab = schedule.alpha_bar(t);
        let mut xs = Matrix::zeros(probe.rows, 2);
        for r in 0..probe.rows { for c in 0..2 {
            xs.set(r, c, ab.sqrt() * probe.get(r, c) + (1.0 - ab).sqrt() * rng.next_gaussian());
        }}
        let (logits, _) = pred.mlp.forward_batch(&xs).unwrap();
        for r in 0..logits.rows {
            let am = (0..100).max_by(|&a, &b| logits.get(r, a).partial_cmp(&logits.get(r, b)).unwrap()).unwrap() + 1;
            fwd_gap += (am as f64 - t as f64).abs();
        }
    }
    println!("forward-sample time gap: {:.2} (baseline 49.5)", fwd_gap / (100.0 * probe.rows as f64));
    let (logits, _) = pred.mlp.forward_batch(&probe).unwrap();
    let mut small = 0;
    for r in 0..logits.rows {
        let am = (0..100).max_by(|&a, &b| logits.get(r, a).partial_cmp(&logits.get(r, b)).unwrap()).unwrap() + 1;
        if am <= 50 { small += 1; }
    }
    println!("clean points argmax <= T/2: {:.3}", small as f64 / probe.rows as f64);

    // Criterion 6 path: drift + learned score, no TAG vs predictor TAG vs analytic TAG.
    let n_sample = 4096;
    let reference = Matrix::from_vec(n_sample, 2, gm.sample(n_sample, &mut Rng::new(99)));
    let drift = |x: &[f64], _: usize| x.iter().map(|v| -0.01 * v).collect::<Vec<f64>>();
    let no_tag = sample_with_drift(&src_learned, &drift, n_sample, 1).unwrap();
    println!("no-TAG drift W1 = {:.3}", sliced_w1(&no_tag.terminal_states(), &reference, 64, 5).unwrap());
    let tls_pred = TlsSource::predictor(&pred.mlp);
    let tls_exact = TlsSource::analytic(&gm, &schedule).unwrap();
    for (name, tls) in [("predictor", &tls_pred), ("analytic", &tls_exact)] {
        let mut best = f64::INFINITY; let mut best_o = 0.0;
        for omega0 in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let set = run_reverse(&src_learned, &ReverseConfig {
                kind: SamplerKind::Ddpm, steps: full_step_indices(100), n_trajectories: n_sample,
                seed: 1, corruption_sigma: 0.0,
                tag: Some(TagConfig { tls, omega_kind: OmegaKind::SqrtOneMinusAbar, omega0 }),
                drift: Some(&drift), record_predicted_times: false,
            }).unwrap();
            let w1 = sliced_w1(&set.terminal_states(), &reference, 64, 5).unwrap();
            println!("  TAG({name}) omega0={omega0}: W1 = {w1:.3}");
            if w1 < best { best = w1; best_o = omega0; }
        }
        println!("TAG({name}) best: {best:.3} @ {best_o}");
    }
}
