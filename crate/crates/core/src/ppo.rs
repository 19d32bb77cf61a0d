//! PPO trainer with knockoff collection and mid-run mask installation.
//!
//! Each rollout optionally stores a knockoff action drawn from the same
//! policy at the same state. Once `tvs` transitions have been stored the
//! knockoff selection runs once; from then on the clipped surrogate uses the
//! masked log probability, so unselected action dimensions contribute neither
//! to the likelihood ratio nor to the gradient.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Env, EnvSpec, Transition};
use crate::error::{Error, Result};
use crate::knockoff::{select_actions, LambdaRule, SelectionConfig, SelectionOutcome};
use crate::nn::{clip_global_norm, Activation, AdamState, Mlp};
use crate::policy::{mask_log_prob, GaussianPolicy, SelectionMask};
use crate::rng::{self, Rng as StreamRng};

/// Which mask the trainer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Knockoff-sampling selection at `tvs`.
    Ks,
    /// No selection; every action kept.
    All,
    /// Oracle mask from the environment's true set.
    True,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Ks => "KS",
            Method::All => "All",
            Method::True => "True",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Method::Ks => "ks",
            Method::All => "all",
            Method::True => "true",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ks" => Ok(Method::Ks),
            "all" => Ok(Method::All),
            "true" => Ok(Method::True),
            other => Err(Error::InvalidConfig(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub lr_pi: f64,
    pub lr_v: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub rollout_len: usize,
    pub total_steps: usize,
    /// Number of stored transitions handed to the selection.
    pub tvs: usize,
    pub alpha: f64,
    pub vote_ratio: f64,
    pub k_folds: usize,
    pub lambda: LambdaRule,
    pub excluded_outcomes: Vec<usize>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub max_grad_norm: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Ks,
            lr_pi: 3e-4,
            lr_v: 1e-3,
            discount: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            epochs: 10,
            minibatch: 256,
            rollout_len: 1000,
            total_steps: 200_000,
            tvs: 4000,
            alpha: 0.1,
            vote_ratio: 0.5,
            k_folds: 5,
            lambda: LambdaRule::default(),
            excluded_outcomes: Vec::new(),
            hidden: vec![64, 32],
            activation: Activation::Tanh,
            max_grad_norm: 0.5,
            eval_every: 2000,
            eval_episodes: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return fail("discount must be in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return fail("gae_lambda must be in [0, 1]");
        }
        if !(self.clip_eps > 0.0) || !(self.lr_pi > 0.0) || !(self.lr_v > 0.0) {
            return fail("clip_eps and learning rates must be positive");
        }
        if self.epochs == 0 || self.minibatch == 0 || self.rollout_len == 0 {
            return fail("epochs, minibatch and rollout_len must be positive");
        }
        if self.total_steps == 0 {
            return fail("total_steps must be positive");
        }
        if self.method == Method::Ks && self.tvs > self.total_steps {
            return fail("tvs must not exceed total_steps");
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return fail("eval_every and eval_episodes must be positive");
        }
        if !(self.max_grad_norm > 0.0) {
            return fail("max_grad_norm must be positive");
        }
        self.selection().validate()
    }

    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            alpha: self.alpha,
            vote_ratio: self.vote_ratio,
            k_folds: self.k_folds,
            lambda: self.lambda,
            excluded_outcomes: self.excluded_outcomes.clone(),
        }
    }
}

/// One rollout. Per-step arrays are row-major with `p` entries per step.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub transitions: Vec<Transition>,
    pub action_dim: usize,
    /// Unclamped draws the log densities refer to.
    pub raw_actions: Vec<f64>,
    /// Per-dimension log densities at collection time.
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    /// `V(s_{t+1})`, used to bootstrap at episode or rollout boundaries.
    pub next_values: Vec<f64>,
    /// True where the GAE recursion must not look past this step.
    pub segment_end: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.r).collect()
    }

    /// Recomputes advantages and returns from the stored rewards and values.
    pub fn compute_advantages(&mut self, discount: f64, lambda: f64) {
        let (adv, ret) = compute_gae(
            &self.rewards(),
            &self.values,
            &self.next_values,
            &self.segment_end,
            discount,
            lambda,
        );
        self.advantages = adv;
        self.returns = ret;
    }
}

/// Generalized advantage estimation.
///
/// `delta_t = r_t + gamma V(s_{t+1}) - V(s_t)` and
/// `A_t = delta_t + gamma lambda A_{t+1}`, restarting after every
/// `segment_end`. Returns `(advantages, advantages + values)`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    segment_end: &[bool],
    discount: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && next_values.len() == n && segment_end.len() == n);
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        if segment_end[t] {
            running = 0.0;
        }
        let delta = rewards[t] + discount * next_values[t] - values[t];
        running = delta + discount * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Clipped surrogate `min(rho A, clip(rho, 1 - eps, 1 + eps) A)`.
#[inline]
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Rollout worker: owns the environment instance and its random streams.
#[derive(Debug, Clone)]
pub struct Collector {
    env: Env,
    state: Vec<f64>,
    episode_id: u64,
    action_rng: StreamRng,
    knockoff_rng: StreamRng,
    reset_rng: StreamRng,
}

impl Collector {
    pub fn new(spec: Arc<EnvSpec>, seed: u64) -> Self {
        let mut reset_rng = rng::stream(seed, 11);
        let mut env = Env::new(spec);
        let state = env.reset(reset_rng.random());
        Self {
            env,
            state,
            episode_id: 0,
            action_rng: rng::stream(seed, 12),
            knockoff_rng: rng::stream(seed, 13),
            reset_rng,
        }
    }

    pub fn spec(&self) -> &EnvSpec {
        self.env.spec()
    }

    /// Runs `n_steps` environment steps under `policy`. With
    /// `store_knockoffs`, every step also carries an independent draw from
    /// the same `pi(. | s_t)`, taken from a dedicated random stream.
    pub fn collect(
        &mut self,
        policy: &GaussianPolicy,
        value_net: &Mlp,
        n_steps: usize,
        store_knockoffs: bool,
    ) -> Result<RolloutBatch> {
        if n_steps == 0 {
            return Err(Error::InvalidConfig("rollout length must be positive".into()));
        }
        let p = policy.action_dim();
        let mut batch = RolloutBatch {
            transitions: Vec::with_capacity(n_steps),
            action_dim: p,
            raw_actions: Vec::with_capacity(n_steps * p),
            log_probs: Vec::with_capacity(n_steps * p),
            values: Vec::with_capacity(n_steps),
            next_values: vec![0.0; n_steps],
            segment_end: vec![false; n_steps],
            advantages: Vec::new(),
            returns: Vec::new(),
        };
        for step in 0..n_steps {
            let s = self.state.clone();
            let mean = policy.mean(&s)?;
            let draw = policy.sample_at(&mean, &mut self.action_rng);
            let knockoff = store_knockoffs.then(|| policy.sample_at(&mean, &mut self.knockoff_rng).action);
            let value = value_net.forward(&s)?[0];
            let t = self.env.elapsed();
            let out = self.env.step(&draw.action)?;
            batch.transitions.push(Transition {
                s,
                a: draw.action,
                a_knockoff: knockoff,
                r: out.reward,
                s_next: out.next_state.clone(),
                t,
                episode_id: self.episode_id,
                done: out.done,
            });
            batch.raw_actions.extend_from_slice(&draw.raw);
            batch.log_probs.extend_from_slice(&draw.log_probs);
            batch.values.push(value);
            let last = step + 1 == n_steps;
            if out.done || last {
                // Episodes end on the time limit, so the boundary bootstraps.
                batch.segment_end[step] = true;
                batch.next_values[step] = value_net.forward(&out.next_state)?[0];
            }
            if out.done {
                self.episode_id += 1;
                self.state = self.env.reset(self.reset_rng.random());
            } else {
                self.state = out.next_state;
            }
        }
        for t in 0..n_steps - 1 {
            if !batch.segment_end[t] {
                batch.next_values[t] = batch.values[t + 1];
            }
        }
        Ok(batch)
    }
}

/// Diagnostics of one PPO update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoLosses {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Policy, value network and their optimizers.
#[derive(Debug, Clone)]
pub struct PpoLearner {
    pub policy: GaussianPolicy,
    pub value_net: Mlp,
    pi_adam: AdamState,
    log_std_adam: AdamState,
    v_adam: AdamState,
}

/// Policy-loss value and gradients for one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateGrad {
    pub loss: f64,
    pub net_grads: Vec<f64>,
    pub log_std_grads: Vec<f64>,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

impl PpoLearner {
    pub fn new(spec: &EnvSpec, config: &TrainConfig) -> Result<Self> {
        let mut init = rng::stream(config.seed, 10);
        let policy = GaussianPolicy::new(
            spec.state_dim,
            spec.action_dim,
            &config.hidden,
            config.activation,
            spec.action_bound,
            &mut init,
        )?;
        let mut sizes = vec![spec.state_dim];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(1);
        let value_net = Mlp::new(&sizes, config.activation, 1.0, &mut init)?;
        Ok(Self::from_parts(policy, value_net, config))
    }

    pub fn from_parts(policy: GaussianPolicy, value_net: Mlp, config: &TrainConfig) -> Self {
        Self {
            pi_adam: AdamState::new(policy.mean_net.num_params(), config.lr_pi),
            log_std_adam: AdamState::new(policy.action_dim(), config.lr_pi),
            v_adam: AdamState::new(value_net.num_params(), config.lr_v),
            policy,
            value_net,
        }
    }

    /// Negative clipped surrogate over `rows` (indices into `batch`) and its
    /// gradient. Only dimensions with `mask[j]` enter the log ratio.
    pub fn surrogate_grad(
        &self,
        batch: &RolloutBatch,
        rows: &[usize],
        advantages: &[f64],
        mask: &[bool],
        clip_eps: f64,
    ) -> Result<SurrogateGrad> {
        let p = batch.action_dim;
        let ds = self.policy.state_dim();
        let mb = rows.len();
        let mut states = Vec::with_capacity(mb * ds);
        let mut raws = Vec::with_capacity(mb * p);
        for &r in rows {
            states.extend_from_slice(&batch.transitions[r].s);
            raws.extend_from_slice(&batch.raw_actions[r * p..(r + 1) * p]);
        }
        let (trace, lp_new) = self.policy.log_prob_batch(&states, &raws, mb)?;
        let mut coeffs = vec![0.0; mb * p];
        let mut loss = 0.0;
        let mut kl = 0.0;
        let mut clipped = 0usize;
        for (i, &r) in rows.iter().enumerate() {
            let new = mask_log_prob(&lp_new[i * p..(i + 1) * p], mask)?;
            let old = mask_log_prob(&batch.log_probs[r * p..(r + 1) * p], mask)?;
            let ratio = (new - old).exp();
            let adv = advantages[r];
            let unclipped = ratio * adv;
            let surrogate = clipped_surrogate(ratio, adv, clip_eps);
            loss -= surrogate / mb as f64;
            kl += (old - new) / mb as f64;
            if (ratio - 1.0).abs() > clip_eps {
                clipped += 1;
            }
            if unclipped <= surrogate {
                let d_new = -ratio * adv / mb as f64;
                for j in 0..p {
                    if mask[j] {
                        coeffs[i * p + j] = d_new;
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("ppo policy loss"));
        }
        let mut net_grads = vec![0.0; self.policy.mean_net.num_params()];
        let mut log_std_grads = vec![0.0; p];
        self.policy
            .accumulate_log_prob_grad(&trace, &raws, &coeffs, &mut net_grads, &mut log_std_grads)?;
        Ok(SurrogateGrad {
            loss,
            net_grads,
            log_std_grads,
            approx_kl: kl,
            clip_fraction: clipped as f64 / mb as f64,
        })
    }

    fn value_step(&mut self, batch: &RolloutBatch, rows: &[usize], max_norm: f64) -> Result<f64> {
        let ds = self.value_net.input_dim();
        let mb = rows.len();
        let mut states = Vec::with_capacity(mb * ds);
        for &r in rows {
            states.extend_from_slice(&batch.transitions[r].s);
        }
        let trace = self.value_net.forward_batch(&states, mb)?;
        let mut upstream = vec![0.0; mb];
        let mut loss = 0.0;
        for (i, &r) in rows.iter().enumerate() {
            let err = trace.output()[i] - batch.returns[r];
            loss += err * err / mb as f64;
            upstream[i] = 2.0 * err / mb as f64;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("ppo value loss"));
        }
        let mut grads = vec![0.0; self.value_net.num_params()];
        self.value_net.backward_batch(&trace, &upstream, &mut grads, false)?;
        clip_global_norm(&mut [&mut grads], max_norm);
        self.v_adam.step(self.value_net.params_mut(), &grads)?;
        Ok(loss)
    }

    /// `epochs` passes of shuffled minibatches over `batch`.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        batch: &mut RolloutBatch,
        mask: &[bool],
        config: &TrainConfig,
        rng: &mut R,
    ) -> Result<PpoLosses> {
        let n = batch.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut totals = PpoLosses::default();
        let mut count = 0usize;
        for _ in 0..config.epochs {
            batch.compute_advantages(config.discount, config.gae_lambda);
            let adv = normalized(&batch.advantages);
            order.shuffle(rng);
            for rows in order.chunks(config.minibatch) {
                let mut g = self.surrogate_grad(batch, rows, &adv, mask, config.clip_eps)?;
                clip_global_norm(&mut [&mut g.net_grads, &mut g.log_std_grads], config.max_grad_norm);
                self.pi_adam.step(self.policy.mean_net.params_mut(), &g.net_grads)?;
                self.log_std_adam.step(self.policy.log_std_mut(), &g.log_std_grads)?;
                self.policy.clamp_log_std();
                let v_loss = self.value_step(batch, rows, config.max_grad_norm)?;
                totals.policy_loss += g.loss;
                totals.value_loss += v_loss;
                totals.approx_kl += g.approx_kl;
                totals.clip_fraction += g.clip_fraction;
                count += 1;
            }
        }
        let c = count.max(1) as f64;
        Ok(PpoLosses {
            policy_loss: totals.policy_loss / c,
            value_loss: totals.value_loss / c,
            approx_kl: totals.approx_kl / c,
            clip_fraction: totals.clip_fraction / c,
        })
    }
}

/// Zero mean, unit variance (population) copy.
pub fn normalized(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    xs.iter().map(|x| (x - mean) / sd).collect()
}

/// Mean and sample standard deviation of undiscounted returns of the
/// deterministic (mean-action) policy, one episode per reset seed.
pub fn evaluate_policy(spec: &Arc<EnvSpec>, policy: &GaussianPolicy, episode_seeds: &[u64]) -> Result<(f64, f64)> {
    if episode_seeds.is_empty() {
        return Err(Error::InvalidConfig("evaluation needs at least one episode".into()));
    }
    let mut env = Env::new(spec.clone());
    let mut returns = Vec::with_capacity(episode_seeds.len());
    for &seed in episode_seeds {
        let mut s = env.reset(seed);
        let mut total = 0.0;
        loop {
            let out = env.step(&policy.mean_action(&s)?)?;
            total += out.reward;
            s = out.next_state;
            if out.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(mean_std(&returns))
}

/// Mean and sample (n - 1) standard deviation; the deviation is exactly 0
/// for one value or identical values.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.windows(2).all(|w| w[0] == w[1]) {
        return (xs.first().copied().unwrap_or(f64::NAN), 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    pub masked: bool,
    pub selected: Vec<usize>,
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub mask_state: MaskState,
    pub wall_clock: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub method: Method,
    pub log: Vec<EvalRecord>,
    pub policy: GaussianPolicy,
    pub value_net: Mlp,
    /// Mask in force at the end of training.
    pub mask: SelectionMask,
    pub selection: Option<SelectionOutcome>,
    pub selection_error: Option<String>,
    /// Transitions handed to the selection (knockoffs included).
    pub selection_buffer: Vec<Transition>,
    pub final_return: f64,
}

/// Evaluation episodes reuse the same reset seeds at every evaluation point.
pub fn eval_seeds(config: &TrainConfig) -> Vec<u64> {
    let mut r = rng::stream(config.seed, 14);
    (0..config.eval_episodes).map(|_| r.random()).collect()
}

/// Runs the full training loop for `config.method`.
pub fn train(spec: &EnvSpec, config: &TrainConfig) -> Result<TrainOutput> {
    train_with(spec, config, |_| {})
}

/// [`train`] with a callback invoked after every evaluation.
pub fn train_with<F: FnMut(&EvalRecord)>(spec: &EnvSpec, config: &TrainConfig, mut on_eval: F) -> Result<TrainOutput> {
    config.validate()?;
    spec.validate()?;
    let start = Instant::now();
    let spec = Arc::new(spec.clone());
    let p = spec.action_dim;
    let mut learner = PpoLearner::new(&spec, config)?;
    let mut collector = Collector::new(spec.clone(), config.seed);
    let mut shuffle_rng = rng::stream(config.seed, 15);
    let seeds = eval_seeds(config);

    let mut mask = match config.method {
        Method::True => SelectionMask::from_indices(p, &spec.ground_truth_set())?,
        Method::Ks | Method::All => SelectionMask::all_ones(p),
    };
    let mut bits = effective_bits(&mask);
    let mut selection_pending = config.method == Method::Ks;
    let mut buffer: Vec<Transition> = Vec::new();
    let mut selection = None;
    let mut selection_error = None;
    let mut log = Vec::new();

    let mut evaluate = |step: usize, learner: &PpoLearner, mask: &SelectionMask, log: &mut Vec<EvalRecord>| -> Result<()> {
        let (mean_return, std_return) = evaluate_policy(&spec, &learner.policy, &seeds)?;
        let record = EvalRecord {
            step,
            mean_return,
            std_return,
            mask_state: MaskState {
                masked: !mask.is_all_ones(),
                selected: mask.selected.clone(),
            },
            wall_clock: start.elapsed().as_secs_f64(),
        };
        on_eval(&record);
        log.push(record);
        Ok(())
    };

    evaluate(0, &learner, &mask, &mut log)?;
    let mut steps = 0;
    while steps < config.total_steps {
        let n = config.rollout_len.min(config.total_steps - steps);
        let mut batch = collector.collect(&learner.policy, &learner.value_net, n, selection_pending)?;
        steps += n;
        if selection_pending {
            let room = config.tvs - buffer.len();
            buffer.extend(batch.transitions.iter().take(room).cloned());
            if buffer.len() >= config.tvs {
                selection_pending = false;
                match select_actions(&buffer, &config.selection()) {
                    Ok(mut outcome) => {
                        outcome.mask.created_at_step = steps as u64;
                        log::info!("selected actions {:?} at step {steps}", outcome.mask.selected);
                        mask = outcome.mask.clone();
                        bits = effective_bits(&mask);
                        selection = Some(outcome);
                    }
                    Err(e) => {
                        log::warn!("action selection failed, continuing unmasked: {e}");
                        selection_error = Some(e.to_string());
                    }
                }
            }
        }
        learner.update(&mut batch, &bits, config, &mut shuffle_rng)?;
        if steps % config.eval_every == 0 || steps == config.total_steps {
            evaluate(steps, &learner, &mask, &mut log)?;
        }
    }

    let final_return = log.last().map(|r| r.mean_return).unwrap_or(f64::NAN);
    Ok(TrainOutput {
        method: config.method,
        log,
        policy: learner.policy,
        value_net: learner.value_net,
        mask,
        selection,
        selection_error,
        selection_buffer: buffer,
        final_return,
    })
}

/// Mask bits used by the update; an empty selection keeps every dimension.
fn effective_bits(mask: &SelectionMask) -> Vec<bool> {
    if mask.is_empty() {
        log::warn!("empty action selection; falling back to the all-ones mask");
        vec![true; mask.action_dim]
    } else {
        mask.bits()
    }
}
