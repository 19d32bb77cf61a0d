//! On-disk training artifacts: both networks as text checkpoints, the
//! policy's standard deviations and bounds, and the mask sidecar.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::policy::{GaussianPolicy, SelectionMask};

const POLICY_NET: &str = "policy_mean.ckpt";
const POLICY_META: &str = "policy.json";
const VALUE_NET: &str = "value.ckpt";
const MASK: &str = "mask.json";

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    log_std: Vec<f64>,
    action_bound: f64,
}

/// A trained agent as stored by [`save_checkpoint`].
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: GaussianPolicy,
    pub value_net: Mlp,
    pub mask: SelectionMask,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, policy: &GaussianPolicy, value_net: &Mlp, mask: &SelectionMask) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(POLICY_NET), policy.mean_net.to_checkpoint())?;
    let meta = PolicyMeta {
        log_std: policy.log_std().to_vec(),
        action_bound: policy.action_bound(),
    };
    std::fs::write(dir.join(POLICY_META), serde_json::to_string_pretty(&meta)?)?;
    std::fs::write(dir.join(VALUE_NET), value_net.to_checkpoint())?;
    std::fs::write(dir.join(MASK), serde_json::to_string_pretty(mask)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let mean_net = Mlp::from_checkpoint(&std::fs::read_to_string(dir.join(POLICY_NET))?)?;
    let meta: PolicyMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(POLICY_META))?)?;
    let policy = GaussianPolicy::from_parts(mean_net, meta.log_std, meta.action_bound)?;
    let value_net = Mlp::from_checkpoint(&std::fs::read_to_string(dir.join(VALUE_NET))?)?;
    let mask: SelectionMask = serde_json::from_str(&std::fs::read_to_string(dir.join(MASK))?)?;
    if mask.action_dim != policy.action_dim() {
        return Err(Error::Checkpoint(format!(
            "mask covers {} actions, policy has {}",
            mask.action_dim,
            policy.action_dim()
        )));
    }
    if value_net.input_dim() != policy.state_dim() || value_net.output_dim() != 1 {
        return Err(Error::Checkpoint("value network shape does not match the policy".into()));
    }
    Ok(Checkpoint {
        policy,
        value_net,
        mask,
    })
}
