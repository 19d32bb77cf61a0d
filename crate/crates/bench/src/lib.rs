//! Fixtures shared by the criterion benches.

use std::sync::Arc;

use actsel_core::env::{EnvSpec, Transition};
use actsel_core::nn::{Activation, Mlp};
use actsel_core::ppo::{Collector, PpoLearner, TrainConfig};

/// `n` transitions with knockoff copies from a freshly initialized policy on
/// the default environment.
pub fn default_buffer(n: usize, seed: u64) -> Vec<Transition> {
    let spec = Arc::new(EnvSpec::default_env(seed));
    let config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let learner = PpoLearner::new(&spec, &config).expect("default config is valid");
    let mut collector = Collector::new(spec, seed);
    collector
        .collect(&learner.policy, &learner.value_net, n, true)
        .expect("rollout on the default environment")
        .transitions
}

/// Policy-sized network `4 -> 64 -> 32 -> 54`.
pub fn policy_net(seed: u64) -> Mlp {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Mlp::new(&[4, 64, 32, 54], Activation::Tanh, 0.01, &mut rng).expect("valid sizes")
}
