//! Diagonal Gaussian policy, knockoff resampling and hard-mask algebra.
//!
//! The mean is `bound * tanh(net(s))` and the standard deviation is a
//! state-independent learnable vector. Sampled actions are clamped to the
//! bounds before they reach the environment or the buffer; log densities are
//! evaluated at the unclamped draw.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::{Activation, BatchTrace, Mlp};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Per-dimension Gaussian log density.
#[inline]
pub fn gaussian_log_density(x: f64, mean: f64, log_std: f64) -> f64 {
    let z = (x - mean) * (-log_std).exp();
    -0.5 * z * z - log_std - HALF_LN_2PI
}

/// One policy draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSample {
    /// Clamped action sent to the environment.
    pub action: Vec<f64>,
    /// Unclamped Gaussian draw.
    pub raw: Vec<f64>,
    /// `log N(raw_j; mu_j, sigma_j^2)` for every dimension.
    pub log_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean_net: Mlp,
    log_std: Vec<f64>,
    action_bound: f64,
}

impl GaussianPolicy {
    /// Orthogonal init with a `0.01`-scaled output layer and `log_std = 0`.
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        action_bound: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(state_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        let mean_net = Mlp::new(&sizes, activation, 0.01, rng)?;
        Self::from_parts(mean_net, vec![0.0; action_dim], action_bound)
    }

    pub fn from_parts(mean_net: Mlp, log_std: Vec<f64>, action_bound: f64) -> Result<Self> {
        check_len("policy log_std", mean_net.output_dim(), log_std.len())?;
        if !(action_bound > 0.0) {
            return Err(Error::InvalidConfig("action bound must be positive".into()));
        }
        let mut pol = Self {
            mean_net,
            log_std,
            action_bound,
        };
        pol.clamp_log_std();
        Ok(pol)
    }

    pub fn state_dim(&self) -> usize {
        self.mean_net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.mean_net.output_dim()
    }

    pub fn action_bound(&self) -> f64 {
        self.action_bound
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn log_std_mut(&mut self) -> &mut [f64] {
        &mut self.log_std
    }

    /// Re-imposes `[LOG_STD_MIN, LOG_STD_MAX]` after an external update.
    pub fn clamp_log_std(&mut self) {
        for v in &mut self.log_std {
            *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn mean(&self, s: &[f64]) -> Result<Vec<f64>> {
        check_len("policy state", self.state_dim(), s.len())?;
        let raw = self.mean_net.forward(s)?;
        self.squash(raw)
    }

    fn squash(&self, mut raw: Vec<f64>) -> Result<Vec<f64>> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy network output"));
        }
        for v in &mut raw {
            *v = self.action_bound * v.tanh();
        }
        Ok(raw)
    }

    /// Deterministic action: the clamped mean.
    pub fn mean_action(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.mean(s)
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R) -> Result<ActionSample> {
        let mean = self.mean(s)?;
        Ok(self.sample_at(&mean, rng))
    }

    /// Fresh independent draw from the same conditional distribution, clamped
    /// exactly like a real action.
    pub fn resample_knockoff<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        Ok(self.sample(s, rng)?.action)
    }

    /// Draw given a precomputed mean.
    pub fn sample_at<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> ActionSample {
        let p = mean.len();
        let mut raw = Vec::with_capacity(p);
        let mut log_probs = Vec::with_capacity(p);
        for (j, &mu) in mean.iter().enumerate() {
            let eps: f64 = rng.sample(StandardNormal);
            let ls = self.log_std[j];
            let x = mu + ls.exp() * eps;
            raw.push(x);
            log_probs.push(-0.5 * eps * eps - ls - HALF_LN_2PI);
        }
        let b = self.action_bound;
        let action = raw.iter().map(|v| v.clamp(-b, b)).collect();
        ActionSample {
            action,
            raw,
            log_probs,
        }
    }

    /// Per-dimension log densities of an unclamped draw.
    pub fn log_prob_components(&self, s: &[f64], raw: &[f64]) -> Result<Vec<f64>> {
        check_len("policy action", self.action_dim(), raw.len())?;
        let mean = self.mean(s)?;
        Ok(mean
            .iter()
            .zip(raw)
            .zip(&self.log_std)
            .map(|((&mu, &x), &ls)| gaussian_log_density(x, mu, ls))
            .collect())
    }

    /// Batched per-dimension log densities (`rows x p`, row-major) together
    /// with the forward trace needed for [`Self::accumulate_log_prob_grad`].
    pub fn log_prob_batch(
        &self,
        states: &[f64],
        raws: &[f64],
        rows: usize,
    ) -> Result<(BatchTrace, Vec<f64>)> {
        let p = self.action_dim();
        check_len("policy batch actions", rows * p, raws.len())?;
        let trace = self.mean_net.forward_batch(states, rows)?;
        let out = trace.output();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy network output"));
        }
        let b = self.action_bound;
        let lp = out
            .iter()
            .zip(raws)
            .enumerate()
            .map(|(i, (&u, &x))| gaussian_log_density(x, b * u.tanh(), self.log_std[i % p]))
            .collect();
        Ok((trace, lp))
    }

    /// Backpropagates `sum_{r,j} coeffs[r,j] * log pi(raw_{r,j} | s_r)` into
    /// `net_grads` and `log_std_grads` (accumulating).
    pub fn accumulate_log_prob_grad(
        &self,
        trace: &BatchTrace,
        raws: &[f64],
        coeffs: &[f64],
        net_grads: &mut [f64],
        log_std_grads: &mut [f64],
    ) -> Result<()> {
        let p = self.action_dim();
        let rows = trace.rows();
        check_len("policy batch actions", rows * p, raws.len())?;
        check_len("policy batch coefficients", rows * p, coeffs.len())?;
        check_len("policy log_std gradient", p, log_std_grads.len())?;
        let b = self.action_bound;
        let out = trace.output();
        let mut upstream = vec![0.0; rows * p];
        for i in 0..rows * p {
            let c = coeffs[i];
            if c == 0.0 {
                continue;
            }
            let j = i % p;
            let th = out[i].tanh();
            let mu = b * th;
            let inv_var = (-2.0 * self.log_std[j]).exp();
            let diff = raws[i] - mu;
            // d lp / d mu = (x - mu) / sigma^2, d mu / d u = b (1 - tanh^2 u)
            upstream[i] = c * diff * inv_var * b * (1.0 - th * th);
            log_std_grads[j] += c * (diff * diff * inv_var - 1.0);
        }
        self.mean_net.backward_batch(trace, &upstream, net_grads, false)?;
        Ok(())
    }
}

/// Binary action mask with selection provenance.
///
/// Serialized form doubles as the mask sidecar written next to checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub action_dim: usize,
    /// Selected indices, ascending.
    pub selected: Vec<usize>,
    /// Per-action fold vote counts (empty when the mask was not voted).
    #[serde(default)]
    pub votes: Vec<usize>,
    #[serde(default)]
    pub n_folds: usize,
    /// W statistics of the last fold.
    #[serde(default)]
    pub w_stats: Vec<f64>,
    /// Threshold of the last fold; `None` when infinite or not applicable.
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub created_at_step: u64,
}

impl SelectionMask {
    pub fn all_ones(action_dim: usize) -> Self {
        Self::bare(action_dim, (0..action_dim).collect())
    }

    pub fn from_indices(action_dim: usize, indices: &[usize]) -> Result<Self> {
        let mut selected = indices.to_vec();
        selected.sort_unstable();
        selected.dedup();
        if let Some(&j) = selected.iter().find(|&&j| j >= action_dim) {
            return Err(Error::InvalidConfig(format!(
                "mask index {j} out of range for {action_dim} actions"
            )));
        }
        Ok(Self::bare(action_dim, selected))
    }

    fn bare(action_dim: usize, selected: Vec<usize>) -> Self {
        Self {
            action_dim,
            selected,
            votes: Vec::new(),
            n_folds: 0,
            w_stats: Vec::new(),
            tau: None,
            created_at_step: 0,
        }
    }

    /// The 0/1 vector `m`.
    pub fn bits(&self) -> Vec<bool> {
        let mut m = vec![false; self.action_dim];
        for &j in &self.selected {
            m[j] = true;
        }
        m
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn is_all_ones(&self) -> bool {
        self.selected.len() == self.action_dim
    }

    pub fn contains(&self, j: usize) -> bool {
        self.selected.binary_search(&j).is_ok()
    }
}

/// `m ⊙ a`.
pub fn mask_action_input(a: &[f64], m: &[bool]) -> Result<Vec<f64>> {
    check_len("mask", a.len(), m.len())?;
    Ok(a.iter()
        .zip(m)
        .map(|(&v, &keep)| if keep { v } else { 0.0 })
        .collect())
}

/// `m · (log pi(a_1|s), ..., log pi(a_p|s))`.
pub fn mask_log_prob(log_probs: &[f64], m: &[bool]) -> Result<f64> {
    check_len("mask", log_probs.len(), m.len())?;
    Ok(log_probs
        .iter()
        .zip(m)
        .filter(|(_, &keep)| keep)
        .map(|(lp, _)| lp)
        .sum())
}

/// Zeroes every off-diagonal covariance entry that touches an unselected
/// action; the diagonal is kept.
pub fn mask_covariance(sigma: &DMatrix<f64>, m: &[bool]) -> Result<DMatrix<f64>> {
    let p = sigma.nrows();
    check_len("covariance columns", p, sigma.ncols())?;
    check_len("mask", p, m.len())?;
    check_symmetric(sigma)?;
    Ok(DMatrix::from_fn(p, p, |i, j| {
        if i == j || (m[i] && m[j]) {
            sigma[(i, j)]
        } else {
            0.0
        }
    }))
}

fn check_symmetric(sigma: &DMatrix<f64>) -> Result<()> {
    let scale = sigma.amax().max(1.0);
    for i in 0..sigma.nrows() {
        for j in i + 1..sigma.ncols() {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::Asymmetric { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// Full-covariance Gaussian action distribution for correlated actions.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelatedGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl CorrelatedGaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_len("covariance", mean.len(), cov.nrows())?;
        check_len("covariance columns", mean.len(), cov.ncols())?;
        check_symmetric(&cov)?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        check_len("action", self.dim(), x.len())?;
        gaussian_log_density_full(&(x - &self.mean), &self.cov)
    }

    /// Distribution with the masked covariance: unselected actions become
    /// independent of everything else.
    pub fn masked(&self, m: &[bool]) -> Result<Self> {
        Ok(Self {
            mean: self.mean.clone(),
            cov: mask_covariance(&self.cov, m)?,
        })
    }

    /// Masked log probability: the joint log density of the selected block
    /// under the masked covariance, with unselected terms removed.
    pub fn masked_log_prob(&self, x: &DVector<f64>, m: &[bool]) -> Result<f64> {
        check_len("action", self.dim(), x.len())?;
        check_len("mask", self.dim(), m.len())?;
        let idx: Vec<usize> = (0..self.dim()).filter(|&i| m[i]).collect();
        if idx.is_empty() {
            return Ok(0.0);
        }
        let diff = DVector::from_iterator(idx.len(), idx.iter().map(|&i| x[i] - self.mean[i]));
        let cov = DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.cov[(idx[a], idx[b])]);
        gaussian_log_density_full(&diff, &cov)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        let chol = self
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidConfig("covariance is not positive definite".into()))?;
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample(StandardNormal));
        Ok(&self.mean + chol.l() * z)
    }
}

fn gaussian_log_density_full(diff: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidConfig("covariance is not positive definite".into()))?;
    let sol = chol.solve(diff);
    let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let k = diff.len() as f64;
    Ok(-0.5 * (diff.dot(&sol) + log_det + k * (2.0 * PI).ln()))
}

/// Anything acting on a `p`-dimensional action vector.
pub trait ActionSpace {
    fn action_dim(&self) -> usize;
}

impl ActionSpace for GaussianPolicy {
    fn action_dim(&self) -> usize {
        GaussianPolicy::action_dim(self)
    }
}

impl<T: ActionSpace + ?Sized> ActionSpace for &T {
    fn action_dim(&self) -> usize {
        (**self).action_dim()
    }
}

/// State-action value function.
pub trait QFunction: ActionSpace {
    fn q_value(&self, s: &[f64], a: &[f64]) -> Result<f64>;
}

impl<T: QFunction + ?Sized> QFunction for &T {
    fn q_value(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        (**self).q_value(s, a)
    }
}

/// MLP critic over the concatenation `[s, a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    pub net: Mlp,
    state_dim: usize,
    action_dim: usize,
}

impl QNetwork {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Self {
            net: Mlp::new(&sizes, activation, 1.0, rng)?,
            state_dim,
            action_dim,
        })
    }

    pub fn input(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        check_len("q state", self.state_dim, s.len())?;
        check_len("q action", self.action_dim, a.len())?;
        Ok(s.iter().chain(a).copied().collect())
    }
}

impl ActionSpace for QNetwork {
    fn action_dim(&self) -> usize {
        self.action_dim
    }
}

impl QFunction for QNetwork {
    fn q_value(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        Ok(self.net.forward(&self.input(s, a)?)?[0])
    }
}

/// A policy or critic viewed through a hard mask. The wrapped object's
/// parameters are never modified.
#[derive(Debug, Clone)]
pub struct Masked<T> {
    inner: T,
    bits: Vec<bool>,
}

/// Wraps `inner` with `mask`. An empty selection would leave nothing to
/// optimize, so it falls back to the all-ones mask with a warning.
pub fn apply_mask<T: ActionSpace>(inner: T, mask: &SelectionMask) -> Result<Masked<T>> {
    check_len("mask", inner.action_dim(), mask.action_dim)?;
    let bits = if mask.is_empty() {
        log::warn!("empty action selection; falling back to the all-ones mask");
        vec![true; mask.action_dim]
    } else {
        mask.bits()
    };
    Ok(Masked { inner, bits })
}

impl<T> Masked<T> {
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }

    pub fn into_inner(self) -> T {
        self.inner
    }
}

impl<T: ActionSpace> ActionSpace for Masked<T> {
    fn action_dim(&self) -> usize {
        self.inner.action_dim()
    }
}

impl<Q: QFunction> QFunction for Masked<Q> {
    fn q_value(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        self.inner.q_value(s, &mask_action_input(a, &self.bits)?)
    }
}

impl<P: std::borrow::Borrow<GaussianPolicy>> Masked<P> {
    fn policy(&self) -> &GaussianPolicy {
        self.inner.borrow()
    }

    /// Masked joint log probability of an unclamped draw.
    pub fn log_prob(&self, s: &[f64], raw: &[f64]) -> Result<f64> {
        mask_log_prob(&self.policy().log_prob_components(s, raw)?, &self.bits)
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R) -> Result<ActionSample> {
        self.policy().sample(s, rng)
    }

    pub fn mean_action(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.policy().mean_action(s)
    }
}
