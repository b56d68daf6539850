//! Pilot for the two-well drift experiment: training throughput, learned
//! score quality, and terminal W1 with and without guidance.

use std::time::Instant;
use taglab_core::linalg::Matrix;
use taglab_core::metrics::sliced_w1;
use taglab_core::net::{train_score_model, train_time_predictor, TrainConfig};
use taglab_core::sampler::{
    run_reverse, full_step_indices, ReverseConfig, SamplerKind, ScoreSource, TagConfig, TlsSource,
};
use taglab_core::schedule::OmegaKind;
use taglab_core::{GaussianMixture, NoiseSchedule, Rng};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let width: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(64);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let n_train: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(40_000);
    let n_sample: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(4096);

    let gm = GaussianMixture::toy_two_wells();
    let schedule = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
    println!("alpha_bar(1)={:.6} alpha_bar(100)={:.3e}", schedule.alpha_bar(1), schedule.alpha_bar(100));

    let data = Matrix::from_vec(n_train, 2, gm.sample(n_train, &mut Rng::new(7)));
    let config = TrainConfig { epochs, learning_rate: lr, ..Default::default() };

    let t0 = Instant::now();
    let score_net = train_score_model(&data, &schedule, &[width, width], &config, 11).unwrap();
    println!(
        "score train: {:.1}s, loss {:.4} -> {:.4}",
        t0.elapsed().as_secs_f64(),
        score_net.loss_history[0],
        score_net.loss_history.last().unwrap()
    );

    let t0 = Instant::now();
    let predictor =
        train_time_predictor(&data, &schedule, &[width, width, width, width], &config, 13).unwrap();
    println!(
        "predictor train: {:.1}s, loss {:.4} -> {:.4}",
        t0.elapsed().as_secs_f64(),
        predictor.loss_history[0],
        predictor.loss_history.last().unwrap()
    );

    // Cosine similarity of learned vs analytic score on a grid near the modes.
    let mut cos_sum = 0.0;
    let mut count = 0;
    let src_learned = ScoreSource::learned(&score_net.mlp, &schedule);
    for t in [1usize, 10, 30, 60, 90] {
        let marginal = gm.perturbed(schedule.alpha_bar(t)).unwrap();
        for i in -2..=2 {
            for j in -2..=2 {
                for center in [(10.0, 10.0), (-10.0, -10.0)] {
                    let ab = schedule.alpha_bar(t).sqrt();
                    let x = vec![center.0 * ab + i as f64, center.1 * ab + j as f64];
                    let exact = marginal.score(&x).unwrap();
                    let learned = src_learned.score(&x, t).unwrap();
                    let dot: f64 = exact.iter().zip(&learned).map(|(a, b)| a * b).sum();
                    let na: f64 = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb: f64 = learned.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if na > 1e-9 && nb > 1e-9 {
                        cos_sum += dot / (na * nb);
                        count += 1;
                    }
                }
            }
        }
    }
    println!("mean score cosine (grid near modes): {:.4}", cos_sum / count as f64);

    // Fresh reference draws.
    let reference = Matrix::from_vec(n_sample, 2, gm.sample(n_sample, &mut Rng::new(99)));

    let drift = |x: &[f64], _: usize| x.iter().map(|v| -0.01 * v).collect::<Vec<f64>>();
    let steps = full_step_indices(100);

    // Exact-score baseline (no drift): self-consistency.
    let src_exact = ScoreSource::analytic(&gm, &schedule).unwrap();
    let t0 = Instant::now();
    let base = taglab_core::sampler::sample_plain(&src_exact, SamplerKind::Ddpm, n_sample, 1).unwrap();
    let w1 = sliced_w1(&base.terminal_states(), &reference, 64, 5).unwrap();
    println!("exact-score plain DDPM W1: {:.3} ({:.1}s)", w1, t0.elapsed().as_secs_f64());

    // Learned score, no drift.
    let t0 = Instant::now();
    let learned_plain =
        taglab_core::sampler::sample_plain(&src_learned, SamplerKind::Ddpm, n_sample, 1).unwrap();
    let w1 = sliced_w1(&learned_plain.terminal_states(), &reference, 64, 5).unwrap();
    println!("learned-score plain DDPM W1: {:.3} ({:.1}s)", w1, t0.elapsed().as_secs_f64());

    // Learned score with drift, no TAG.
    let t0 = Instant::now();
    let drifted = taglab_core::sampler::sample_with_drift(&src_learned, &drift, n_sample, 1).unwrap();
    let w1_no_tag = sliced_w1(&drifted.terminal_states(), &reference, 64, 5).unwrap();
    println!("learned-score drift no-TAG W1: {:.3} ({:.1}s)", w1_no_tag, t0.elapsed().as_secs_f64());

    // Exact score with drift.
    let drifted_exact = taglab_core::sampler::sample_with_drift(&src_exact, &drift, n_sample, 1).unwrap();
    let w1_exact_drift = sliced_w1(&drifted_exact.terminal_states(), &reference, 64, 5).unwrap();
    println!("exact-score drift no-TAG W1: {:.3}", w1_exact_drift);

    // Drift + TAG over an omega grid, predictor TLS and analytic TLS.
    let tls_pred = TlsSource::predictor(&predictor.mlp);
    let tls_exact = TlsSource::analytic(&gm, &schedule).unwrap();
    for (name, tls) in [("predictor", &tls_pred), ("analytic", &tls_exact)] {
        for omega0 in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let t0 = Instant::now();
            let set = run_reverse(
                &src_learned,
                &ReverseConfig {
                    kind: SamplerKind::Ddpm,
                    steps: steps.clone(),
                    n_trajectories: n_sample,
                    seed: 1,
                    corruption_sigma: 0.0,
                    tag: Some(TagConfig { tls, omega_kind: OmegaKind::SqrtOneMinusAbar, omega0 }),
                    drift: Some(&drift),
                    record_predicted_times: false,
                },
            )
            .unwrap();
            let w1 = sliced_w1(&set.terminal_states(), &reference, 64, 5).unwrap();
            println!("drift + TAG({name}) omega0={omega0}: W1 = {:.3} ({:.1}s)", w1, t0.elapsed().as_secs_f64());
        }
    }
}
