//! Linear-Gaussian MDPs with a planted influential action set.
//!
//! Only the action coordinates in the true set `G` enter the dynamics and the
//! reward:
//!
//! ```text
//! s' = A s + B a[G] + sigma_w * eps,    r = -|s|^2 - c |a[G]|^2
//! ```
//!
//! Every other coordinate is redundant by construction, so any selection can
//! be scored exactly against `G`.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::{self, Rng as EnvRng};

const RESET_STREAM: u64 = 0x5eed;
const EIGEN_RANGE: (f64, f64) = (0.6, 0.95);
const SINGULAR_RANGE: (f64, f64) = (0.5, 1.5);

/// Generator parameters for [`EnvSpec::generate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvParams {
    pub state_dim: usize,
    pub action_dim: usize,
    /// Size of the influential set; ignored when `true_set` is given.
    pub n_true: usize,
    /// Explicit influential indices (0-based). Defaults to `0..n_true`.
    pub true_set: Option<Vec<usize>>,
    pub noise_scale: f64,
    pub action_cost: f64,
    pub horizon: usize,
    pub action_bound: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            state_dim: 4,
            action_dim: 54,
            n_true: 4,
            true_set: None,
            noise_scale: 0.05,
            action_cost: 0.01,
            horizon: 100,
            action_bound: 1.0,
        }
    }
}

impl EnvParams {
    /// `n_true` influential actions followed by `extra` redundant ones.
    pub fn with_dummies(n_true: usize, extra: usize) -> Self {
        Self {
            n_true,
            action_dim: n_true + extra,
            ..Self::default()
        }
    }
}

/// Immutable MDP definition. `a` is `state_dim x state_dim`, `b` is
/// `state_dim x |true_set|`, both stored as row vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub true_set: Vec<usize>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub noise_scale: f64,
    pub action_cost: f64,
    pub horizon: usize,
    pub action_bound: f64,
    /// Seed the matrices were generated from, kept for provenance.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl EnvSpec {
    /// Default 54-action environment with four influential actions.
    pub fn default_env(seed: u64) -> Self {
        Self::generate(&EnvParams::default(), seed).expect("default parameters are valid")
    }

    /// Draws `A` symmetric with eigenvalues of magnitude in `[0.6, 0.95]` and
    /// `B` with singular values in `[0.5, 1.5]`.
    pub fn generate(params: &EnvParams, seed: u64) -> Result<Self> {
        let ds = params.state_dim;
        if ds == 0 {
            return Err(Error::InvalidSpec("state_dim must be positive".into()));
        }
        let true_set = match &params.true_set {
            Some(set) => set.clone(),
            None => (0..params.n_true).collect(),
        };
        let k = true_set.len();
        let mut rng = rng::stream(seed, 1);

        let q = random_orthogonal(ds, ds, &mut rng);
        let eig = Uniform::new_inclusive(EIGEN_RANGE.0, EIGEN_RANGE.1).expect("valid range");
        let lambdas: Vec<f64> = (0..ds)
            .map(|_| {
                let mag: f64 = rng.sample(eig);
                if rng.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let a = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(lambdas)) * q.transpose();

        let b = if k == 0 {
            DMatrix::zeros(ds, 0)
        } else {
            let r = ds.min(k);
            let u = random_orthogonal(ds, r, &mut rng);
            let v = random_orthogonal(k, r, &mut rng);
            let sv = Uniform::new_inclusive(SINGULAR_RANGE.0, SINGULAR_RANGE.1).expect("valid range");
            let s = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(r, |_, _| rng.sample(sv)));
            u * s * v.transpose()
        };

        let spec = Self {
            state_dim: ds,
            action_dim: params.action_dim,
            true_set,
            a: to_rows(&a),
            b: to_rows(&b),
            noise_scale: params.noise_scale,
            action_cost: params.action_cost,
            horizon: params.horizon,
            action_bound: params.action_bound,
            seed: Some(seed),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks shapes, index ranges, scalar ranges and stability of `A`.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        let ds = self.state_dim;
        if ds == 0 || self.action_dim == 0 {
            return bad("state_dim and action_dim must be positive".into());
        }
        if self.true_set.len() > self.action_dim {
            return bad("true set larger than the action space".into());
        }
        let mut seen = vec![false; self.action_dim];
        for &j in &self.true_set {
            if j >= self.action_dim {
                return bad(format!("true-set index {j} out of range"));
            }
            if std::mem::replace(&mut seen[j], true) {
                return bad(format!("duplicate true-set index {j}"));
            }
        }
        if self.a.len() != ds || self.a.iter().any(|r| r.len() != ds) {
            return bad(format!("A must be {ds}x{ds}"));
        }
        let k = self.true_set.len();
        if self.b.len() != ds || self.b.iter().any(|r| r.len() != k) {
            return bad(format!("B must be {ds}x{k}"));
        }
        let finite = self.a.iter().chain(&self.b).flatten().all(|v| v.is_finite());
        if !finite {
            return bad("non-finite matrix entry".into());
        }
        if !(self.noise_scale >= 0.0 && self.action_cost >= 0.0) {
            return bad("noise_scale and action_cost must be non-negative".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if !(self.action_bound > 0.0 && self.action_bound.is_finite()) {
            return bad("action_bound must be positive".into());
        }
        let rho = self.spectral_radius();
        if !(rho < 1.0) {
            return bad(format!("spectral radius of A is {rho}, must be < 1"));
        }
        Ok(())
    }

    pub fn spectral_radius(&self) -> f64 {
        let a = DMatrix::from_fn(self.state_dim, self.state_dim, |i, j| self.a[i][j]);
        a.complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// The influential index set `G`, sorted.
    pub fn ground_truth_set(&self) -> Vec<usize> {
        let mut g = self.true_set.clone();
        g.sort_unstable();
        g
    }

    pub fn clamp_action(&self, a: &[f64]) -> Vec<f64> {
        let m = self.action_bound;
        a.iter().map(|v| v.clamp(-m, m)).collect()
    }

    /// Deterministic transition for a given noise draw (`eps` standard normal,
    /// length `state_dim`). Actions are clamped to the bounds first.
    pub fn transition(&self, s: &[f64], a: &[f64], eps: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_len("env state", self.state_dim, s.len())?;
        check_len("env action", self.action_dim, a.len())?;
        check_len("env noise", self.state_dim, eps.len())?;
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("action"));
        }
        let a = self.clamp_action(a);
        let ag: Vec<f64> = self.true_set.iter().map(|&j| a[j]).collect();
        let next = (0..self.state_dim)
            .map(|i| {
                let drift: f64 = self.a[i].iter().zip(s).map(|(x, y)| x * y).sum();
                let control: f64 = self.b[i].iter().zip(&ag).map(|(x, y)| x * y).sum();
                drift + control + self.noise_scale * eps[i]
            })
            .collect();
        let reward = -s.iter().map(|v| v * v).sum::<f64>()
            - self.action_cost * ag.iter().map(|v| v * v).sum::<f64>();
        Ok((next, reward))
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let spec: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// `rows x cols` (rows >= cols) with orthonormal columns.
fn random_orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(rows, cols, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// One buffered step, including the optional knockoff action copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_knockoff: Option<Vec<f64>>,
    pub r: f64,
    pub s_next: Vec<f64>,
    /// Step index within the episode.
    pub t: usize,
    pub episode_id: u64,
    #[serde(default)]
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Stateful episode runner over a shared [`EnvSpec`].
#[derive(Debug, Clone)]
pub struct Env {
    spec: std::sync::Arc<EnvSpec>,
    state: Vec<f64>,
    t: usize,
    rng: EnvRng,
}

impl Env {
    pub fn new(spec: std::sync::Arc<EnvSpec>) -> Self {
        let state = vec![0.0; spec.state_dim];
        Self {
            spec,
            state,
            t: 0,
            rng: rng::stream(0, RESET_STREAM),
        }
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn elapsed(&self) -> usize {
        self.t
    }

    /// Starts an episode from a state uniform on `[-1, 1]^d`. The same seed
    /// always yields the same state and the same noise sequence.
    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = rng::stream(seed, RESET_STREAM);
        let u = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
        self.state = (0..self.spec.state_dim).map(|_| self.rng.sample(u)).collect();
        self.t = 0;
        self.state.clone()
    }

    pub fn step(&mut self, a: &[f64]) -> Result<StepOutcome> {
        let eps: Vec<f64> = (0..self.spec.state_dim)
            .map(|_| self.rng.sample(StandardNormal))
            .collect();
        let (next, reward) = self.spec.transition(&self.state, a, &eps)?;
        self.state = next.clone();
        self.t += 1;
        Ok(StepOutcome {
            next_state: next,
            reward,
            done: self.t >= self.spec.horizon,
        })
    }
}
