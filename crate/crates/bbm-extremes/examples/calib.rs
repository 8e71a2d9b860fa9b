use bbm_extremes::spine::{estimate_acceptance_rate, sample_cluster_batch};
use std::time::Instant;

fn main() {
    for &(t, n) in &[(20.0, 6000u64), (40.0, 3000), (64.0, 2000)] {
        let t0 = Instant::now();
        let r = estimate_acceptance_rate(t, 8.0_f64.min(t / 4.0), n, 11, 2).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        println!(
            "acceptance t={t}: rate {:.4} +- {:.4} (t*rate {:.3}), {:.0} draws/s",
            r.rate, r.stderr, t * r.rate, n as f64 / dt
        );
    }
    let t0 = Instant::now();
    let s = sample_cluster_batch(64.0, 8.0, 40, 4000, 5, 2).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let att: f64 = s.iter().map(|x| x.attempts as f64).sum::<f64>() / s.len() as f64;
    println!("cluster t=64: {:.2} accepted/s, mean attempts {:.1}", s.len() as f64 / dt, att);
}
