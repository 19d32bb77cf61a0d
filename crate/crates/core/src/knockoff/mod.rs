//! Knockoff-sampling action selection.
//!
//! Pipeline over a buffer of transitions that carry resampled knockoff
//! actions:
//!
//! 1. split rows into `K` folds by `t mod K`;
//! 2. in each fold, regress every outcome (reward and each next-state
//!    coordinate) on `[S, A, Ã]` with a LASSO and take `|coef|` of each
//!    action and its knockoff as importance scores;
//! 3. take the max over outcomes, form `W_j = Z_j - Z̃_j`, threshold at the
//!    knockoff level `tau_alpha` and keep `{j : W_j >= tau}`;
//! 4. keep actions selected in at least a fraction `Gamma` of folds.

mod lasso;
mod stats;

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use lasso::{
    kkt_residual, lasso_cd, lasso_cd_with, soft_threshold, LambdaRule, LassoFit, DEFAULT_MAX_SWEEPS,
    DEFAULT_TOL,
};
pub use stats::{aggregate_w, knockoff_threshold, majority_vote, select_by_threshold};

use crate::env::Transition;
use crate::error::{Error, Result};
use crate::policy::SelectionMask;
use lasso::{compare_columns, Design};

/// Fewest rows a fold may have.
pub const MIN_FOLD_ROWS: usize = 20;

/// Buffer rows arranged as matrices. `outcomes` has `state_dim + 1` columns:
/// reward first, then the next state.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDataset {
    pub states: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    pub knockoffs: DMatrix<f64>,
    pub outcomes: DMatrix<f64>,
    /// Original buffer position of every row.
    pub rows: Vec<usize>,
}

impl AugmentedDataset {
    pub fn new(
        states: DMatrix<f64>,
        actions: DMatrix<f64>,
        knockoffs: DMatrix<f64>,
        outcomes: DMatrix<f64>,
    ) -> Result<Self> {
        let rows = (0..states.nrows()).collect();
        let ds = Self {
            states,
            actions,
            knockoffs,
            outcomes,
            rows,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        let same_rows = [&self.actions, &self.knockoffs, &self.outcomes]
            .iter()
            .all(|m| m.nrows() == n)
            && self.rows.len() == n;
        if !same_rows {
            return Err(Error::InvalidConfig("dataset matrices disagree on row count".into()));
        }
        if self.actions.ncols() != self.knockoffs.ncols() {
            return Err(Error::InvalidConfig("action and knockoff widths differ".into()));
        }
        if self.outcomes.ncols() == 0 {
            return Err(Error::InvalidConfig("dataset has no outcome columns".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.ncols()
    }

    fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            states: self.states.select_rows(idx),
            actions: self.actions.select_rows(idx),
            knockoffs: self.knockoffs.select_rows(idx),
            outcomes: self.outcomes.select_rows(idx),
            rows: idx.iter().map(|&i| self.rows[i]).collect(),
        }
    }

    /// Same data with action column `j` and its knockoff exchanged.
    pub fn swap_knockoff(&self, j: usize) -> Self {
        let mut out = self.clone();
        out.actions.set_column(j, &self.knockoffs.column(j));
        out.knockoffs.set_column(j, &self.actions.column(j));
        out
    }
}

/// Assembles the augmented design from a buffer, in buffer order.
pub fn build_augmented(buffer: &[Transition]) -> Result<AugmentedDataset> {
    let first = buffer
        .first()
        .ok_or_else(|| Error::InsufficientData("empty transition buffer".into()))?;
    let (n, ds, p) = (buffer.len(), first.s.len(), first.a.len());
    let mut states = DMatrix::zeros(n, ds);
    let mut actions = DMatrix::zeros(n, p);
    let mut knockoffs = DMatrix::zeros(n, p);
    let mut outcomes = DMatrix::zeros(n, ds + 1);
    for (t, tr) in buffer.iter().enumerate() {
        let ko = tr.a_knockoff.as_ref().ok_or(Error::MissingKnockoff(t))?;
        if tr.s.len() != ds || tr.s_next.len() != ds || tr.a.len() != p || ko.len() != p {
            return Err(Error::DimensionMismatch {
                context: "buffered transition",
                expected: ds + p,
                actual: tr.s.len() + tr.a.len(),
            });
        }
        for i in 0..ds {
            states[(t, i)] = tr.s[i];
            outcomes[(t, i + 1)] = tr.s_next[i];
        }
        outcomes[(t, 0)] = tr.r;
        for j in 0..p {
            actions[(t, j)] = tr.a[j];
            knockoffs[(t, j)] = ko[j];
        }
    }
    AugmentedDataset::new(states, actions, knockoffs, outcomes)
}

/// Partitions rows into `k` folds; fold `i` (0-based) holds the rows whose
/// original index `t` satisfies `t mod k == i`.
pub fn sample_split(ds: &AugmentedDataset, k: usize) -> Result<Vec<AugmentedDataset>> {
    if k == 0 {
        return Err(Error::InvalidConfig("number of folds must be positive".into()));
    }
    if k > ds.len() {
        return Err(Error::InsufficientData(format!(
            "{k} folds requested for {} rows",
            ds.len()
        )));
    }
    Ok((0..k)
        .map(|fold| {
            let idx: Vec<usize> = (0..ds.len()).filter(|&r| ds.rows[r] % k == fold).collect();
            ds.select_rows(&idx)
        })
        .collect())
}

/// Per-action importance scores, `p x n_outcomes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub z: DMatrix<f64>,
    pub z_knockoff: DMatrix<f64>,
    /// Outcome column indices that were scored.
    pub outcomes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Target FDR level.
    pub alpha: f64,
    /// Majority-vote ratio.
    pub vote_ratio: f64,
    pub k_folds: usize,
    pub lambda: LambdaRule,
    /// Outcome columns left out of the response (0 = reward, `i + 1` = next
    /// state coordinate `i`).
    pub excluded_outcomes: Vec<usize>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            vote_ratio: 0.5,
            k_folds: 5,
            lambda: LambdaRule::default(),
            excluded_outcomes: Vec::new(),
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !(self.vote_ratio > 0.0 && self.vote_ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "vote ratio must be in (0, 1], got {}",
                self.vote_ratio
            )));
        }
        if self.k_folds == 0 {
            return Err(Error::InvalidConfig("k_folds must be positive".into()));
        }
        self.lambda.validate()
    }
}

/// LASSO importance scores of every action and knockoff for every outcome.
///
/// State columns enter the design but are not scored. Within each
/// action/knockoff pair the update order depends only on the two columns'
/// values, so exchanging a pair exchanges its scores bit for bit.
pub fn importance_scores(fold: &AugmentedDataset, config: &SelectionConfig) -> Result<ImportanceScores> {
    let n = fold.len();
    if n < MIN_FOLD_ROWS {
        return Err(Error::InsufficientData(format!(
            "fold has {n} rows, need at least {MIN_FOLD_ROWS}"
        )));
    }
    let (ds, p) = (fold.state_dim(), fold.action_dim());
    // Column-major storage: every column is a contiguous chunk of `n`.
    let columns = fold
        .states
        .as_slice()
        .chunks(n)
        .chain(fold.actions.as_slice().chunks(n))
        .chain(fold.knockoffs.as_slice().chunks(n))
        .collect::<Vec<_>>();
    let mut design = Design::from_columns(columns.iter().copied(), n)?;
    let mut order: Vec<usize> = (0..ds).collect();
    for j in 0..p {
        let (a, k) = (ds + j, ds + p + j);
        if compare_columns(columns[a], columns[k]).is_le() {
            order.extend([a, k]);
        } else {
            order.extend([k, a]);
        }
    }
    design.set_order(order);

    let outcomes: Vec<usize> = (0..fold.outcomes.ncols())
        .filter(|i| !config.excluded_outcomes.contains(i))
        .collect();
    if outcomes.is_empty() {
        return Err(Error::InvalidConfig("every outcome column is excluded".into()));
    }
    let mut z = DMatrix::zeros(p, outcomes.len());
    let mut z_knockoff = DMatrix::zeros(p, outcomes.len());
    for (col, &i) in outcomes.iter().enumerate() {
        let y = fold.outcomes.column(i);
        let y = y.as_slice();
        let first = y[0];
        if y.iter().all(|&v| v == first) {
            log::warn!("outcome column {i} is constant; its importance scores are zero");
            continue;
        }
        // Scores of different outcomes are compared by the max, so each outcome
        // is brought to unit variance first.
        let mean = y.iter().sum::<f64>() / n as f64;
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let y: Vec<f64> = y.iter().map(|v| (v - mean) / sd).collect();
        let fit = design.fit(&y, config.lambda, DEFAULT_TOL, DEFAULT_MAX_SWEEPS)?;
        if !fit.converged {
            log::warn!("lasso for outcome {i} hit the sweep limit");
        }
        for j in 0..p {
            z[(j, col)] = fit.coefficients[ds + j].abs();
            z_knockoff[(j, col)] = fit.coefficients[ds + p + j].abs();
        }
    }
    Ok(ImportanceScores {
        z,
        z_knockoff,
        outcomes,
    })
}

/// Selection result of one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSelection {
    pub selected: Vec<usize>,
    pub w: Vec<f64>,
    pub tau: f64,
    pub scores: ImportanceScores,
}

pub fn select_fold(fold: &AugmentedDataset, config: &SelectionConfig) -> Result<FoldSelection> {
    let scores = importance_scores(fold, config)?;
    let w = aggregate_w(&scores.z, &scores.z_knockoff)?;
    let tau = knockoff_threshold(&w, config.alpha);
    Ok(FoldSelection {
        selected: select_by_threshold(&w, tau),
        w,
        tau,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub rows: usize,
    pub selected: Vec<usize>,
    pub w: Vec<f64>,
    /// `None` when no finite threshold exists.
    pub tau: Option<f64>,
}

/// Everything needed to audit one selection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub alpha: f64,
    pub vote_ratio: f64,
    pub k_folds: usize,
    pub lambda: LambdaRule,
    pub n_rows: usize,
    pub folds: Vec<FoldReport>,
    pub vote_frequencies: Vec<f64>,
    pub selected: Vec<usize>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    /// Raw selection; may be empty.
    pub mask: SelectionMask,
    pub report: SelectionReport,
}

impl SelectionOutcome {
    pub fn selected(&self) -> &[usize] {
        &self.mask.selected
    }
}

/// Full pipeline on a transition buffer.
pub fn select_actions(buffer: &[Transition], config: &SelectionConfig) -> Result<SelectionOutcome> {
    config.validate()?;
    let need = MIN_FOLD_ROWS * config.k_folds;
    if buffer.len() < need {
        return Err(Error::InsufficientData(format!(
            "selection with {} folds needs at least {need} transitions, got {}; increase T_vs",
            config.k_folds,
            buffer.len()
        )));
    }
    let ds = build_augmented(buffer)?;
    select_from_dataset(&ds, config)
}

/// Pipeline on an already assembled dataset.
pub fn select_from_dataset(ds: &AugmentedDataset, config: &SelectionConfig) -> Result<SelectionOutcome> {
    config.validate()?;
    let start = Instant::now();
    let k = config.k_folds;
    let p = ds.action_dim();
    let folds = sample_split(ds, k)?;
    let mut reports = Vec::with_capacity(k);
    let mut per_fold = Vec::with_capacity(k);
    for (i, fold) in folds.iter().enumerate() {
        let sel = select_fold(fold, config)?;
        reports.push(FoldReport {
            fold: i,
            rows: fold.len(),
            selected: sel.selected.clone(),
            w: sel.w.clone(),
            tau: sel.tau.is_finite().then_some(sel.tau),
        });
        per_fold.push(sel.selected);
    }
    let (selected, votes) = majority_vote(&per_fold, p, config.vote_ratio)?;
    let last = reports.last().expect("at least one fold");
    let mask = SelectionMask {
        action_dim: p,
        selected: selected.clone(),
        votes: votes.clone(),
        n_folds: k,
        w_stats: last.w.clone(),
        tau: last.tau,
        created_at_step: ds.len() as u64,
    };
    let report = SelectionReport {
        alpha: config.alpha,
        vote_ratio: config.vote_ratio,
        k_folds: k,
        lambda: config.lambda,
        n_rows: ds.len(),
        folds: reports,
        vote_frequencies: votes.iter().map(|&v| v as f64 / k as f64).collect(),
        selected,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(SelectionOutcome { mask, report })
}
