#![allow(dead_code)]

use actsel_core::env::Transition;
use actsel_core::ppo::{Collector, PpoLearner, TrainConfig};
use actsel_core::EnvSpec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Asymptotic Kolmogorov distribution tail `P(K > x)`.
pub fn kolmogorov_tail(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..200 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * x * x).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov test; returns `(D, p-value)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0usize, 0usize, 0f64);
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let sq = ne.sqrt();
    // Stephens' small-sample correction.
    let p = kolmogorov_tail((sq + 0.12 + 0.11 / sq) * d);
    (d, p)
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// A knockoff-bearing buffer from the freshly initialized policy.
pub fn default_buffer(spec: &EnvSpec, n: usize, seed: u64) -> Vec<Transition> {
    let config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let learner = PpoLearner::new(spec, &config).unwrap();
    let mut collector = Collector::new(Arc::new(spec.clone()), seed);
    collector
        .collect(&learner.policy, &learner.value_net, n, true)
        .unwrap()
        .transitions
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Regression-style data with known nulls. Actions depend on the state
/// through a linear mean, knockoffs are independent draws from the same
/// conditional law, and every outcome is linear in the state and in the
/// actions listed in `truth` (coefficient `signal`) plus unit noise.
pub fn regression_dataset(
    n: usize,
    ds: usize,
    p: usize,
    truth: &[usize],
    signal: f64,
    seed: u64,
) -> actsel_core::knockoff::AugmentedDataset {
    use nalgebra::DMatrix;
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng(seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut r) };
    let state_load: Vec<f64> = (0..p * ds).map(|_| 0.3 * normal()).collect();
    let n_out = ds + 1;
    let drift: Vec<f64> = (0..n_out * ds).map(|_| 0.5 * normal()).collect();
    let gain: Vec<f64> = (0..n_out * truth.len())
        .map(|_| {
            let g = normal();
            signal * (0.5 + g.abs()) * g.signum()
        })
        .collect();
    let mut s = DMatrix::zeros(n, ds);
    let mut a = DMatrix::zeros(n, p);
    let mut k = DMatrix::zeros(n, p);
    let mut y = DMatrix::zeros(n, n_out);
    for t in 0..n {
        for i in 0..ds {
            s[(t, i)] = normal();
        }
        for j in 0..p {
            let mu: f64 = (0..ds).map(|i| state_load[j * ds + i] * s[(t, i)]).sum();
            a[(t, j)] = mu + normal();
            k[(t, j)] = mu + normal();
        }
        for o in 0..n_out {
            let mut v: f64 = (0..ds).map(|i| drift[o * ds + i] * s[(t, i)]).sum();
            for (c, &j) in truth.iter().enumerate() {
                v += gain[o * truth.len() + c] * a[(t, j)];
            }
            y[(t, o)] = v + normal();
        }
    }
    actsel_core::knockoff::AugmentedDataset::new(s, a, k, y).unwrap()
}
