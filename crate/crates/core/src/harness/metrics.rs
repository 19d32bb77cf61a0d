use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quality of a selected set against the true influential set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    /// `|Ĝ ∩ G| / |G|` (1 when `G` is empty).
    pub tpr: f64,
    /// `|Ĝ \ G| / max(1, |Ĝ|)`.
    pub fdr: f64,
    /// `|Ĝ \ G| / |G^c|` (0 when `G^c` is empty).
    pub fpr: f64,
    /// `|Ĝ \ G| / (1/q + |Ĝ|)`.
    pub mfdr_estimate: f64,
    pub selected: Vec<usize>,
    pub truth: Vec<usize>,
}

/// Scores with the mFDR level `q = 0.1`.
pub fn score_selection(selected: &[usize], truth: &[usize], p: usize) -> Result<SelectionMetrics> {
    score_selection_at(selected, truth, p, 0.1)
}

pub fn score_selection_at(selected: &[usize], truth: &[usize], p: usize, q: f64) -> Result<SelectionMetrics> {
    let mut in_truth = vec![false; p];
    for &j in truth {
        if j >= p {
            return Err(Error::InvalidConfig(format!("true index {j} out of range")));
        }
        in_truth[j] = true;
    }
    let mut sel = selected.to_vec();
    sel.sort_unstable();
    sel.dedup();
    if let Some(&j) = sel.iter().find(|&&j| j >= p) {
        return Err(Error::InvalidConfig(format!("selected index {j} out of range")));
    }
    let mut truth_sorted = truth.to_vec();
    truth_sorted.sort_unstable();
    truth_sorted.dedup();

    let hits = sel.iter().filter(|&&j| in_truth[j]).count();
    let false_pos = sel.len() - hits;
    let nulls = p - truth_sorted.len();
    let tpr = if truth_sorted.is_empty() {
        1.0
    } else {
        hits as f64 / truth_sorted.len() as f64
    };
    let fdr = false_pos as f64 / sel.len().max(1) as f64;
    let fpr = if nulls == 0 {
        0.0
    } else {
        false_pos as f64 / nulls as f64
    };
    let mfdr_estimate = false_pos as f64 / (1.0 / q + sel.len() as f64);
    Ok(SelectionMetrics {
        tpr,
        fdr,
        fpr,
        mfdr_estimate,
        selected: sel,
        truth: truth_sorted,
    })
}
