use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::curves::{emit_curves, write_curves_csv, write_log, CurvePoint};
use super::metrics::{score_selection, SelectionMetrics};
use crate::env::{EnvParams, EnvSpec};
use crate::error::{Error, Result};
use crate::ppo::{mean_std, train, Method, TrainConfig, TrainOutput};

/// Environment section of an experiment config: either a saved spec or
/// generator parameters plus a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec_path: Option<PathBuf>,
    #[serde(flatten)]
    pub params: EnvParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            spec_path: None,
            params: EnvParams::default(),
        }
    }
}

impl EnvConfig {
    pub fn build(&self) -> Result<EnvSpec> {
        match &self.spec_path {
            Some(path) => EnvSpec::load_json(path),
            None => EnvSpec::generate(&self.params, self.seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Environment label used in output tables.
    pub name: String,
    pub methods: Vec<Method>,
    pub n_seeds: usize,
    pub env: EnvConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "linear".into(),
            methods: vec![Method::Ks, Method::All, Method::True],
            n_seeds: 10,
            env: EnvConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a TOML config; a relative `spec_path` resolves against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: Self = toml::from_str(&std::fs::read_to_string(path)?)?;
        if let (Some(spec), Some(dir)) = (&cfg.env.spec_path, path.parent()) {
            if spec.is_relative() {
                cfg.env.spec_path = Some(dir.join(spec));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(Error::InvalidConfig("n_seeds must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("no methods configured".into()));
        }
        for &method in &self.methods {
            TrainConfig {
                method,
                ..self.train.clone()
            }
            .validate()?;
        }
        Ok(())
    }
}

/// One training run's outcome.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub method: Method,
    pub seed: u64,
    pub outcome: std::result::Result<(TrainOutput, SelectionMetrics), String>,
}

/// Per-run CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub env: String,
    pub method: String,
    pub seed: u64,
    pub p: usize,
    pub tpr: f64,
    pub fdr: f64,
    pub fpr: f64,
    pub final_reward: f64,
}

/// Per-method summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub env: String,
    pub rl_algo: String,
    pub p: usize,
    pub selection: String,
    pub tpr: f64,
    pub fdr: f64,
    pub fpr: f64,
    pub reward: f64,
    pub reward_std: f64,
    pub n_runs: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub rows: Vec<SummaryRow>,
    pub runs: Vec<RunRow>,
    pub curves: Vec<CurvePoint>,
    pub failures: Vec<(Method, u64, String)>,
}

/// The selection a run is scored on: the raw knockoff selection for KS
/// (or the mask in force if the selection failed), the mask otherwise.
fn scored_selection(out: &TrainOutput) -> Vec<usize> {
    match (&out.method, &out.selection) {
        (Method::Ks, Some(sel)) => sel.mask.selected.clone(),
        _ => out.mask.selected.clone(),
    }
}

/// Trains one `(method, seed)` and scores its selection.
pub fn run_seed(spec: &EnvSpec, base: &TrainConfig, method: Method, seed: u64) -> Result<(TrainOutput, SelectionMetrics)> {
    let config = TrainConfig {
        method,
        seed,
        ..base.clone()
    };
    let out = train(spec, &config)?;
    let metrics = score_selection(&scored_selection(&out), &spec.ground_truth_set(), spec.action_dim)?;
    Ok((out, metrics))
}

/// Runs every configured method for `n_seeds` seeds (`train.seed`,
/// `train.seed + 1`, ...). With `out_dir`, writes one JSON-lines log per run,
/// `runs.csv`, `summary.csv` and `curves.csv`. A failed run is recorded and
/// the sweep continues.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentSummary> {
    config.validate()?;
    let spec = config.env.build()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        spec.save_json(dir.join("env.json"))?;
    }
    let p = spec.action_dim;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut logs = Vec::new();
    let mut failures = Vec::new();
    for &method in &config.methods {
        let mut metrics = Vec::new();
        let mut rewards = Vec::new();
        let mut failed = 0;
        for i in 0..config.n_seeds {
            let seed = config.train.seed + i as u64;
            match run_seed(&spec, &config.train, method, seed) {
                Ok((out, m)) => {
                    if let Some(dir) = out_dir {
                        write_log(dir.join(format!("{}_seed{seed}.jsonl", method.slug())), &out.log)?;
                    }
                    runs.push(RunRow {
                        env: config.name.clone(),
                        method: method.label().into(),
                        seed,
                        p,
                        tpr: m.tpr,
                        fdr: m.fdr,
                        fpr: m.fpr,
                        final_reward: out.final_return,
                    });
                    rewards.push(out.final_return);
                    logs.push((method.label().to_string(), out.log));
                    metrics.push(m);
                }
                Err(e) => {
                    log::error!("{} seed {seed} failed: {e}", method.label());
                    failures.push((method, seed, e.to_string()));
                    failed += 1;
                }
            }
        }
        let avg = |f: fn(&SelectionMetrics) -> f64| {
            if metrics.is_empty() {
                f64::NAN
            } else {
                metrics.iter().map(f).sum::<f64>() / metrics.len() as f64
            }
        };
        let (reward, reward_std) = if rewards.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_std(&rewards)
        };
        rows.push(SummaryRow {
            env: config.name.clone(),
            rl_algo: "PPO".into(),
            p,
            selection: method.label().into(),
            tpr: avg(|m| m.tpr),
            fdr: avg(|m| m.fdr),
            fpr: avg(|m| m.fpr),
            reward,
            reward_std,
            n_runs: metrics.len(),
            n_failed: failed,
        });
    }
    let curves = emit_curves(&logs);
    if let Some(dir) = out_dir {
        write_run_rows(dir.join("runs.csv"), &runs)?;
        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        for row in &rows {
            w.serialize(row)?;
        }
        w.flush()?;
        write_curves_csv(dir.join("curves.csv"), &curves)?;
    }
    Ok(ExperimentSummary {
        rows,
        runs,
        curves,
        failures,
    })
}

pub fn write_run_rows(path: impl AsRef<Path>, rows: &[RunRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
