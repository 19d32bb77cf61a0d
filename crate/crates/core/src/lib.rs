//! Action selection for reinforcement learning in redundant action spaces.
//!
//! The crate identifies which action dimensions actually influence rewards and
//! state transitions, using knockoff copies resampled from the policy itself as
//! negative controls, and folds the selection back into policy optimization
//! through hard masks.
//!
//! Modules:
//!
//! - [`nn`]: fixed-topology MLP with exact reverse-mode gradients and Adam.
//! - [`env`]: linear-Gaussian MDPs with a known influential action set.
//! - [`policy`]: diagonal Gaussian policy, knockoff resampling and mask algebra.
//! - [`ppo`]: clipped-surrogate trainer that installs a selection mask mid-run.
//! - [`knockoff`]: sample splitting, LASSO importance scores, knockoff
//!   thresholding and majority vote.
//! - [`harness`]: selection metrics, multi-seed experiments and curve tables.

pub mod env;
pub mod error;
pub mod harness;
pub mod knockoff;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod rng;

pub use env::{Env, EnvParams, EnvSpec, StepOutcome, Transition};
pub use error::{Error, Result};
pub use harness::{score_selection, Method, SelectionMetrics};
pub use knockoff::{select_actions, SelectionConfig, SelectionOutcome, SelectionReport};
pub use nn::{Activation, AdamState, Mlp};
pub use policy::{GaussianPolicy, SelectionMask};
pub use ppo::{train, TrainConfig, TrainOutput};
