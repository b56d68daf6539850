//! Naive score-sum composition vs the exact joint conditional.
use taglab_core::linalg::Matrix;
use taglab_core::metrics::sliced_w1;
use taglab_core::sampler::*;
use taglab_core::{GaussianMixture, MarginalFamily, NoiseSchedule, Rng};

/// Condition a mixture on an isotropic Gaussian likelihood exp(-|x-c|²/2s²):
/// components stay isotropic; weights pick up the marginal likelihood.
fn condition(gm: &GaussianMixture, c: &[f64], s2: f64) -> GaussianMixture {
    let d = gm.dim() as f64;
    let mut log_w: Vec<f64> = Vec::new();
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for i in 0..gm.n_components() {
        let v = gm.variances[i];
        let fused_var = 1.0 / (1.0 / v + 1.0 / s2);
        let mean: Vec<f64> = gm.means[i]
            .iter()
            .zip(c)
            .map(|(&m, &cv)| fused_var * (m / v + cv / s2))
            .collect();
        let dist2: f64 = gm.means[i].iter().zip(c).map(|(&m, &cv)| (m - cv) * (m - cv)).sum();
        let lw = gm.weights[i].max(1e-300).ln()
            - 0.5 * d * (2.0 * std::f64::consts::PI * (v + s2)).ln()
            - 0.5 * dist2 / (v + s2);
        log_w.push(lw);
        means.push(mean);
        vars.push(fused_var);
    }
    let m = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = log_w.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = raw.iter().sum();
    GaussianMixture::new(raw.iter().map(|w| w / total).collect(), means, vars).unwrap()
}

fn main() {
    let gm = GaussianMixture::new(
        vec![0.55, 0.35, 0.10],
        vec![vec![8.0, 0.0], vec![0.0, 8.0], vec![8.0, 8.0]],
        vec![2.0, 2.0, 2.0],
    )
    .unwrap();
    let c1 = vec![8.0, 4.0];
    let c2 = vec![4.0, 8.0];
    let s2 = 4.0;

    let g1 = condition(&gm, &c1, s2);
    let g12 = condition(&g1, &c2, s2);
    println!("joint weights: {:?}", g12.weights);

    let schedule = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
    println!("alpha_bar(T) = {:.2e}", schedule.alpha_bar(100));
    let n = 3000;
    let fresh = Matrix::from_vec(n, 2, g12.sample(n, &mut Rng::new(111)));

    // Exact conditional sampler.
    let src_joint = ScoreSource::analytic(&g12, &schedule).unwrap();
    let exact_set = sample_plain(&src_joint, SamplerKind::Ddpm, n, 7).unwrap();
    let d_exact = sliced_w1(&exact_set.terminal_states(), &fresh, 64, 9).unwrap();

    // Naive composition: score(x|c1) + score(x|c2) - score(x), bespoke loop.
    let fam_base = MarginalFamily::new(&gm, &schedule).unwrap();
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
            let s0 = fam_base.score(&x, t).unwrap();
            let inv = 1.0 / (1.0 - beta).sqrt();
            let sd = beta.sqrt();
            for j in 0..2 {
                let _ = &s0; let drift = s1[j] + s2v[j];
                x[j] = (x[j] + beta * drift) * inv + sd * rng.next_gaussian();
            }
        }
        terminal.row_mut(i).copy_from_slice(&x);
    }
    let d_naive = sliced_w1(&terminal, &fresh, 64, 9).unwrap();
    println!("exact sampler distance: {d_exact:.4}");
    println!("naive composition distance: {d_naive:.4} (ratio {:.2})", d_naive / d_exact);
}
