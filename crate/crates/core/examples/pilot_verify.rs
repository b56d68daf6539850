//! Full-size verification suite timing and stability.
use std::time::Instant;
use taglab_core::verify::{run_all, VerifyConfig};

fn main() {
    for seed in [17u64, 42, 123, 2024] {
        let config = VerifyConfig { seed, ..Default::default() };
        let t0 = Instant::now();
        let reports = run_all(&config).unwrap();
        println!("seed {seed} ({:.2}s):", t0.elapsed().as_secs_f64());
        for r in &reports {
            println!("  {}: passed={} max_abs={:.3e} max_rel={:.3e} | {}", r.name, r.passed, r.max_abs_error, r.max_rel_error, r.details);
        }
    }
}
