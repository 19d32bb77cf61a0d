mod common;

use std::sync::Arc;

use actsel_core::nn::Activation;
use actsel_core::policy::{
    apply_mask, mask_log_prob, GaussianPolicy, QFunction, QNetwork, SelectionMask, LOG_STD_MIN,
};
use actsel_core::ppo::{evaluate_policy, Collector};
use actsel_core::EnvSpec;
use common::{ks_two_sample, pearson, rel_err, rng};
use rand::Rng;

fn policy(ds: usize, p: usize, seed: u64) -> GaussianPolicy {
    let mut r = rng(seed);
    let mut pol = GaussianPolicy::new(ds, p, &[16, 8], Activation::Tanh, 1.0, &mut r).unwrap();
    // Move the means away from zero so clamping and tanh both matter.
    for v in pol.mean_net.params_mut() {
        *v += r.random_range(-0.3..0.3);
    }
    for v in pol.log_std_mut() {
        *v = r.random_range(-1.0..0.3);
    }
    pol
}

#[test]
fn knockoff_marginals_match_and_are_uncorrelated() {
    let pol = policy(4, 6, 1);
    let s = [0.4, -0.3, 0.8, 0.1];
    let mut ra = rng(100);
    let mut rk = rng(200);
    let n = 10_000;
    let mut a = vec![Vec::with_capacity(n); 6];
    let mut k = vec![Vec::with_capacity(n); 6];
    for _ in 0..n {
        let draw = pol.sample(&s, &mut ra).unwrap().action;
        let knock = pol.resample_knockoff(&s, &mut rk).unwrap();
        for j in 0..6 {
            a[j].push(draw[j]);
            k[j].push(knock[j]);
        }
    }
    for j in 0..6 {
        let (_, p) = ks_two_sample(&a[j], &k[j]);
        assert!(p > 0.01, "dim {j}: KS p = {p}");
        let c = pearson(&a[j], &k[j]);
        assert!(c.abs() <= 0.05, "dim {j}: corr {c}");
    }
}

#[test]
fn knockoff_is_deterministic_given_rng_state() {
    let pol = policy(4, 6, 2);
    let s = [0.1; 4];
    let x = pol.resample_knockoff(&s, &mut rng(9)).unwrap();
    let y = pol.resample_knockoff(&s, &mut rng(9)).unwrap();
    assert_eq!(x, y);
}

#[test]
fn tiny_std_samples_sit_on_the_mean() {
    let mut pol = policy(4, 6, 3);
    for v in pol.log_std_mut() {
        *v = -50.0;
    }
    pol.clamp_log_std();
    assert!(pol.log_std().iter().all(|&v| v == LOG_STD_MIN));
    let s = [0.2, 0.0, -0.5, 0.3];
    let mean = pol.mean(&s).unwrap();
    let sigma = LOG_STD_MIN.exp();
    let mut r = rng(4);
    for _ in 0..1000 {
        let a = pol.sample(&s, &mut r).unwrap().action;
        for (x, m) in a.iter().zip(&mean) {
            assert!((x - m).abs() <= 3e-2 * 3.0 * sigma.max(1.0));
        }
    }
}

/// Finite-difference check of the batched log-density gradient, and exact
/// zeros on final-layer rows of masked outputs.
#[test]
fn masked_log_prob_gradient() {
    let pol = policy(3, 5, 5);
    let m = [true, false, true, false, false];
    let mut r = rng(6);
    let rows = 4;
    let states: Vec<f64> = (0..rows * 3).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut raws = Vec::new();
    for i in 0..rows {
        raws.extend(pol.sample(&states[i * 3..(i + 1) * 3], &mut r).unwrap().raw);
    }
    let objective = |pol: &GaussianPolicy| -> f64 {
        (0..rows)
            .map(|i| {
                let lp = pol
                    .log_prob_components(&states[i * 3..(i + 1) * 3], &raws[i * 5..(i + 1) * 5])
                    .unwrap();
                mask_log_prob(&lp, &m).unwrap()
            })
            .sum()
    };
    let coeffs: Vec<f64> = (0..rows * 5).map(|i| if m[i % 5] { 1.0 } else { 0.0 }).collect();
    let (trace, _) = pol.log_prob_batch(&states, &raws, rows).unwrap();
    let mut g = vec![0.0; pol.mean_net.num_params()];
    let mut gs = vec![0.0; 5];
    pol.accumulate_log_prob_grad(&trace, &raws, &coeffs, &mut g, &mut gs).unwrap();

    let last = pol.mean_net.num_layers() - 1;
    for j in (0..5).filter(|&j| !m[j]) {
        assert!(g[pol.mean_net.weight_row_range(last, j)].iter().all(|&v| v == 0.0));
        assert_eq!(g[pol.mean_net.bias_range(last).start + j], 0.0);
        assert_eq!(gs[j], 0.0);
    }

    let h = 1e-5;
    for k in 0..pol.mean_net.num_params() {
        let mut plus = pol.clone();
        plus.mean_net.params_mut()[k] += h;
        let mut minus = pol.clone();
        minus.mean_net.params_mut()[k] -= h;
        let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
        if fd.abs().max(g[k].abs()) > 1e-6 {
            assert!(rel_err(g[k], fd) <= 1e-4, "param {k}: {} vs {fd}", g[k]);
        }
    }
    for j in 0..5 {
        let mut plus = pol.clone();
        plus.log_std_mut()[j] += h;
        let mut minus = pol.clone();
        minus.log_std_mut()[j] -= h;
        let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
        assert!((gs[j] - fd).abs() <= 1e-4 * fd.abs().max(1.0));
    }
}

#[test]
fn index_mapping_and_all_ones_wrapper() {
    let mask = SelectionMask::from_indices(4, &[0, 1]).unwrap();
    assert_eq!(mask.bits(), vec![true, true, false, false]);

    let mut r = rng(7);
    let q = QNetwork::new(2, 4, &[8], Activation::Tanh, &mut r).unwrap();
    let ones = apply_mask(&q, &SelectionMask::all_ones(4)).unwrap();
    let pol = policy(2, 4, 8);
    let pol_ones = apply_mask(&pol, &SelectionMask::all_ones(4)).unwrap();
    for _ in 0..100 {
        let s: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
        let a: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        assert_eq!(ones.q_value(&s, &a).unwrap(), q.q_value(&s, &a).unwrap());
        let full: f64 = pol.log_prob_components(&s, &a).unwrap().iter().sum();
        assert_eq!(pol_ones.log_prob(&s, &a).unwrap(), full);
        assert_eq!(pol_ones.mean_action(&s).unwrap(), pol.mean_action(&s).unwrap());
    }
}

/// Whatever the policy emits on masked redundant dimensions, trajectories
/// and returns are unchanged.
#[test]
fn masked_redundant_outputs_do_not_change_trajectories() {
    let spec = Arc::new(EnvSpec::default_env(0));
    let mut r = rng(10);
    let base = GaussianPolicy::new(4, 54, &[64, 32], Activation::Tanh, 1.0, &mut r).unwrap();
    let last = base.mean_net.num_layers() - 1;
    let mut zeroed = base.clone();
    let mut randomized = base.clone();
    for j in 4..54 {
        let rows = base.mean_net.weight_row_range(last, j);
        let bias = base.mean_net.bias_range(last).start + j;
        for k in rows.clone() {
            zeroed.mean_net.params_mut()[k] = 0.0;
            randomized.mean_net.params_mut()[k] = r.random_range(-3.0..3.0);
        }
        zeroed.mean_net.params_mut()[bias] = 0.0;
        randomized.mean_net.params_mut()[bias] = r.random_range(-3.0..3.0);
    }
    let value = actsel_core::Mlp::zeros(&[4, 1], Activation::Tanh).unwrap();
    let b1 = Collector::new(spec.clone(), 1).collect(&zeroed, &value, 500, false).unwrap();
    let b2 = Collector::new(spec.clone(), 1).collect(&randomized, &value, 500, false).unwrap();
    for (t1, t2) in b1.transitions.iter().zip(&b2.transitions) {
        assert_eq!(t1.s, t2.s);
        assert_eq!(t1.r, t2.r);
        assert_eq!(t1.a[..4], t2.a[..4]);
    }
    let seeds: Vec<u64> = (0..10).collect();
    assert_eq!(
        evaluate_policy(&spec, &zeroed, &seeds).unwrap(),
        evaluate_policy(&spec, &randomized, &seeds).unwrap()
    );
}
