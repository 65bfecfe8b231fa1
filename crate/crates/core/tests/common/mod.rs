#![allow(dead_code)]

use privalign::env::{Environment, Policy};
use privalign::rng::RandomSource;

pub fn random_row(k: usize, rng: &mut RandomSource) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| -(1.0 - rng.uniform()).ln()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

pub fn random_policy(prompts: usize, responses: usize, rng: &mut RandomSource) -> Policy {
    Policy::new((0..prompts).map(|_| random_row(responses, rng)).collect()).unwrap()
}

/// Rewards uniform on [0, r_max], pi_ref bounded away from zero.
pub fn random_env(prompts: usize, responses: usize, r_max: f64, rng: &mut RandomSource) -> Environment {
    let rho = random_row(prompts, rng);
    let reward = (0..prompts)
        .map(|_| (0..responses).map(|_| r_max * rng.uniform()).collect())
        .collect();
    let pi_ref = Policy::new(
        (0..prompts)
            .map(|_| {
                let row = random_row(responses, rng);
                let floor = 0.05 / responses as f64;
                let scale = 1.0 - floor * responses as f64;
                row.iter().map(|p| floor + scale * p).collect()
            })
            .collect(),
    )
    .unwrap();
    Environment::new(rho, reward, r_max, pi_ref).unwrap()
}

pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    assert!(f(lo) < 0.0 && f(hi) > 0.0);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Three-sigma binomial tolerance check.
pub fn within_se(hits: usize, n: usize, p: f64) -> bool {
    let se = (p * (1.0 - p) / n as f64).sqrt();
    ((hits as f64 / n as f64) - p).abs() <= 3.0 * se
}
