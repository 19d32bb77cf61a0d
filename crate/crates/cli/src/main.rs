use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use actsel_core::harness::{run_experiment, save_checkpoint, write_log, ExperimentConfig};
use actsel_core::{score_selection, select_actions, train, Method, TrainConfig};
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

/// Knockoff-based action selection for PPO on redundant action spaces.
#[derive(Debug, Parser)]
#[command(name = "actsel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one policy and write its log, checkpoint and selection.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        /// Total environment steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Collect `tvs` transitions while training and run the selection once.
    Select {
        #[command(flatten)]
        common: Common,
    },
    /// Run every method over several seeds and write summary tables.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Restrict the sweep to one method.
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        n_seeds: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// FDR level of the knockoff threshold.
    #[arg(long)]
    alpha: Option<f64>,
    /// Fraction of folds that must select an action.
    #[arg(long)]
    gamma_vote: Option<f64>,
    #[arg(long)]
    k_folds: Option<usize>,
    /// Transitions handed to the selection.
    #[arg(long)]
    tvs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: actsel_core::Error| e.to_string())
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        let t = &mut cfg.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.alpha {
            t.alpha = v;
        }
        if let Some(v) = self.gamma_vote {
            t.vote_ratio = v;
        }
        if let Some(v) = self.k_folds {
            t.k_folds = v;
        }
        if let Some(v) = self.tvs {
            t.tvs = v;
        }
        Ok(cfg)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(common: &Common, method: Option<Method>, steps: Option<usize>) -> Result<serde_json::Value> {
    let cfg = common.load()?;
    let config = TrainConfig {
        method: method.unwrap_or(cfg.train.method),
        total_steps: steps.unwrap_or(cfg.train.total_steps),
        ..cfg.train.clone()
    };
    config.validate()?;
    let spec = cfg.env.build()?;
    let out = train(&spec, &config)?;
    let truth = spec.ground_truth_set();
    let metrics = score_selection(&out.mask.selected, &truth, spec.action_dim)?;
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir)?;
        spec.save_json(dir.join("env.json"))?;
        write_log(dir.join("log.jsonl"), &out.log)?;
        save_checkpoint(dir, &out.policy, &out.value_net, &out.mask)?;
        if let Some(sel) = &out.selection {
            write_json(&dir.join("selection.json"), &sel.report)?;
        }
    }
    Ok(json!({
        "method": config.method.slug(),
        "seed": config.seed,
        "total_steps": config.total_steps,
        "final_return": out.final_return,
        "selected": out.mask.selected,
        "truth": truth,
        "metrics": metrics,
        "selection_error": out.selection_error,
    }))
}

fn cmd_select(common: &Common) -> Result<serde_json::Value> {
    let cfg = common.load()?;
    let config = TrainConfig {
        method: Method::Ks,
        total_steps: cfg.train.tvs,
        ..cfg.train.clone()
    };
    config.validate()?;
    let spec = cfg.env.build()?;
    let out = train(&spec, &config)?;
    // The trainer keeps going past a failed selection; rerun it on the same
    // buffer to surface the typed error.
    let sel = match out.selection {
        Some(sel) => sel,
        None => select_actions(&out.selection_buffer, &config.selection())?,
    };
    let truth = spec.ground_truth_set();
    let metrics = score_selection(sel.selected(), &truth, spec.action_dim)?;
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir)?;
        spec.save_json(dir.join("env.json"))?;
        write_json(&dir.join("selection.json"), &sel.report)?;
        write_json(&dir.join("mask.json"), &sel.mask)?;
    }
    Ok(json!({
        "seed": config.seed,
        "tvs": config.tvs,
        "selected": sel.selected(),
        "truth": truth,
        "metrics": metrics,
        "vote_frequencies": sel.report.vote_frequencies,
        "wall_clock_secs": sel.report.wall_clock_secs,
    }))
}

fn cmd_experiment(
    common: &Common,
    method: Option<Method>,
    steps: Option<usize>,
    n_seeds: Option<usize>,
) -> Result<serde_json::Value> {
    let mut cfg = common.load()?;
    if let Some(m) = method {
        cfg.methods = vec![m];
    }
    if let Some(s) = steps {
        cfg.train.total_steps = s;
    }
    if let Some(n) = n_seeds {
        cfg.n_seeds = n;
    }
    let summary = run_experiment(&cfg, common.out.as_deref())?;
    let failures: Vec<_> = summary
        .failures
        .iter()
        .map(|(m, seed, e)| json!({"method": m.slug(), "seed": seed, "error": e}))
        .collect();
    Ok(json!({"summary": summary.rows, "failures": failures}))
}

fn error_json(kind: &str, err: &anyhow::Error) -> String {
    // Core errors already print their source, so drop chain links whose text
    // the previous link contains.
    let mut parts: Vec<String> = Vec::new();
    for link in err.chain() {
        let text = link.to_string();
        if !parts.last().is_some_and(|prev| prev.contains(&text)) {
            parts.push(text);
        }
    }
    json!({"error": {"kind": kind, "message": parts.join(": ")}}).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.render().to_string();
            eprintln!("{}", json!({"error": {"kind": "usage", "message": msg.trim()}}));
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Train { common, method, steps } => cmd_train(common, *method, *steps),
        Command::Select { common } => cmd_select(common),
        Command::Experiment {
            common,
            method,
            steps,
            n_seeds,
        } => cmd_experiment(common, *method, *steps, *n_seeds),
    };
    match result {
        Ok(value) => {
            // A closed pipe on stdout is not a failure of the run.
            let text = serde_json::to_string_pretty(&value).expect("serializable");
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let kind = err
                .chain()
                .find_map(|e| e.downcast_ref::<actsel_core::Error>())
                .map_or("runtime", |e| e.kind());
            eprintln!("{}", error_json(kind, &err));
            ExitCode::FAILURE
        }
    }
}
