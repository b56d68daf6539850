use taglab_core::{GaussianMixture, MarginalFamily, NoiseSchedule, Rng};
fn main() {
    let gm = GaussianMixture::toy_two_wells();
    for (name, bmin, bmax) in [("noised(1e-3,0.2)", 1e-3, 0.2), ("standard(1e-4,0.02)", 1e-4, 0.02)] {
        let schedule = NoiseSchedule::linear(100, bmin, bmax).unwrap();
        let family = MarginalFamily::new(&gm, &schedule).unwrap();
        let mut rng = Rng::new(6);
        let n = 100;
        let mut profile = Vec::new();
        for t in 1..=100usize {
            let mut acc = 0.0;
            for _ in 0..n {
                let x0 = gm.sample_point(&mut rng);
                let x = schedule.forward_perturb(&x0, t, &mut rng).unwrap();
                acc += (family.time_posterior(&x).unwrap().argmax_step() as f64 - t as f64).abs();
            }
            profile.push(acc / n as f64);
        }
        let mean = |r: std::ops::Range<usize>| profile[r.clone()].iter().sum::<f64>() / r.len() as f64;
        println!("{name}: t1-25 {:.2}, t26-50 {:.2}, t51-75 {:.2}, t76-100 {:.2}",
            mean(0..25), mean(25..50), mean(50..75), mean(75..100));
    }
}
