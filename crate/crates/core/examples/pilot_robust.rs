//! Predictor seed-robustness for the drift experiment.
use taglab_core::linalg::Matrix;
use taglab_core::metrics::sliced_w1;
use taglab_core::net::*;
use taglab_core::sampler::*;
use taglab_core::schedule::OmegaKind;
use taglab_core::{GaussianMixture, NoiseSchedule, Rng};

fn main() {
    let gm = GaussianMixture::toy_two_wells();
    let schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let data = Matrix::from_vec(40_000, 2, gm.sample(40_000, &mut Rng::new(7)));
    let n = 2048;
    let reference = Matrix::from_vec(n, 2, gm.sample(n, &mut Rng::new(99)));
    let drift = |x: &[f64], _: usize| x.iter().map(|v| -0.01 * v).collect::<Vec<f64>>();

    // Two score models to bracket the no-TAG side.
    for score_seed in [7u64, 11] {
        let cfg = TrainConfig { epochs: 1500, learning_rate: 1e-3, ..Default::default() };
        let score = train_score_model(&data, &schedule, &[32, 32], &cfg, score_seed).unwrap();
        let src = ScoreSource::learned(&score.mlp, &schedule);
        let no_tag = sample_with_drift(&src, &drift, n, 1).unwrap();
        let w1 = sliced_w1(&no_tag.terminal_states(), &reference, 64, 5).unwrap();
        println!("score seed {score_seed} (1500ep): no-TAG W1 = {w1:.3}, loss {:.4}", score.loss_history.last().unwrap());

        for pred_seed in [8u64, 13, 21] {
            let pcfg = TrainConfig { epochs: 1000, learning_rate: 1e-3, ..Default::default() };
            let pred = train_time_predictor(&data, &schedule, &[32, 32, 32, 32], &pcfg, pred_seed).unwrap();
            let tls = TlsSource::predictor(&pred.mlp);
            let mut best = f64::INFINITY;
            let mut best_w = 0.0;
            for omega0 in [0.25, 0.5, 1.0, 2.0] {
                let set = run_reverse(&src, &ReverseConfig {
                    kind: SamplerKind::Ddpm, steps: full_step_indices(100), n_trajectories: n,
                    seed: 1, corruption_sigma: 0.0,
                    tag: Some(TagConfig { tls: &tls, omega_kind: OmegaKind::SqrtOneMinusAbar, omega0 }),
                    drift: Some(&drift), record_predicted_times: false,
                }).unwrap();
                let w1 = sliced_w1(&set.terminal_states(), &reference, 64, 5).unwrap();
                if w1 < best { best = w1; best_w = omega0; }
            }
            println!("  pred seed {pred_seed} (1000ep): TAG best = {best:.3} @ {best_w}, loss {:.4}", pred.loss_history.last().unwrap());
        }
    }
}
