//! Compare the two candidate toy schedules: fully noised vs standard-range.

use taglab_core::linalg::Matrix;
use taglab_core::metrics::sliced_w1;
use taglab_core::net::{train_score_model, TrainConfig};
use taglab_core::sampler::{run_reverse, full_step_indices, ReverseConfig, SamplerKind, ScoreSource, TagConfig, TlsSource};
use taglab_core::schedule::OmegaKind;
use taglab_core::{GaussianMixture, NoiseSchedule, Rng};

fn main() {
    let gm = GaussianMixture::toy_two_wells();
    let n_sample = 2048;
    let reference = Matrix::from_vec(n_sample, 2, gm.sample(n_sample, &mut Rng::new(99)));
    let data = Matrix::from_vec(40_000, 2, gm.sample(40_000, &mut Rng::new(7)));
    let config = TrainConfig { epochs: 1000, learning_rate: 1e-3, ..Default::default() };
    let drift = |x: &[f64], _: usize| x.iter().map(|v| -0.01 * v).collect::<Vec<f64>>();

    for (name, bmin, bmax) in [("standard(1e-4..0.02)", 1e-4, 0.02)] {
        let schedule = NoiseSchedule::linear(100, bmin, bmax).unwrap();
        println!("== {name}: alpha_bar(T) = {:.4}", schedule.alpha_bar(100));
        let trained = train_score_model(&data, &schedule, &[32, 32], &config, 11).unwrap();
        println!("train loss {:.4} -> {:.4}", trained.loss_history[0], trained.loss_history.last().unwrap());
        let src = ScoreSource::learned(&trained.mlp, &schedule);
        let src_exact = ScoreSource::analytic(&gm, &schedule).unwrap();
        let tls_exact = TlsSource::analytic(&gm, &schedule).unwrap();

        for (label, s) in [("learned", &src), ("exact", &src_exact)] {
            let plain = taglab_core::sampler::sample_plain(s, SamplerKind::Ddpm, n_sample, 1).unwrap();
            let w1p = sliced_w1(&plain.terminal_states(), &reference, 64, 5).unwrap();
            let drifted = taglab_core::sampler::sample_with_drift(s, &drift, n_sample, 1).unwrap();
            let w1d = sliced_w1(&drifted.terminal_states(), &reference, 64, 5).unwrap();
            println!("{label}: plain W1 = {w1p:.3}, drift W1 = {w1d:.3}");
        }
        for omega0 in [0.5, 1.0, 2.0, 4.0] {
            let set = run_reverse(&src, &ReverseConfig {
                kind: SamplerKind::Ddpm,
                steps: full_step_indices(100),
                n_trajectories: n_sample,
                seed: 1,
                corruption_sigma: 0.0,
                tag: Some(TagConfig { tls: &tls_exact, omega_kind: OmegaKind::SqrtOneMinusAbar, omega0 }),
                drift: Some(&drift),
                record_predicted_times: false,
            }).unwrap();
            let w1 = sliced_w1(&set.terminal_states(), &reference, 64, 5).unwrap();
            println!("drift + analytic TAG omega0={omega0}: W1 = {w1:.3}");
        }
    }
}
