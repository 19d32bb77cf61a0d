//! Knockoff statistics, threshold and vote.

use nalgebra::DMatrix;

use crate::error::{check_len, Error, Result};

/// `W_j = max_i Z[j, i] - max_i Z̃[j, i]`.
pub fn aggregate_w(z: &DMatrix<f64>, z_knockoff: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_len("knockoff score rows", z.nrows(), z_knockoff.nrows())?;
    check_len("knockoff score columns", z.ncols(), z_knockoff.ncols())?;
    if z.ncols() == 0 {
        return Err(Error::InvalidConfig("no outcome columns to aggregate".into()));
    }
    let row_max = |m: &DMatrix<f64>, j: usize| m.row(j).iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((0..z.nrows())
        .map(|j| row_max(z, j) - row_max(z_knockoff, j))
        .collect())
}

/// Smallest `tau` among the nonzero `|W_j|` with
/// `#{W_j <= -tau} / #{W_j >= tau} <= alpha`; `+inf` when none qualifies.
/// A zero denominator never qualifies.
pub fn knockoff_threshold(w: &[f64], alpha: f64) -> f64 {
    let mut candidates: Vec<f64> = w.iter().filter(|&&v| v != 0.0).map(|v| v.abs()).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    // Sorted copies let each candidate be counted by binary search.
    let mut pos: Vec<f64> = w.iter().copied().filter(|&v| v > 0.0).collect();
    let mut neg: Vec<f64> = w.iter().filter(|&&v| v < 0.0).map(|v| -v).collect();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    for tau in candidates {
        let above = pos.len() - pos.partition_point(|&v| v < tau);
        if above == 0 {
            continue;
        }
        let below = neg.len() - neg.partition_point(|&v| v < tau);
        if below as f64 / above as f64 <= alpha {
            return tau;
        }
    }
    f64::INFINITY
}

/// `{j : W_j >= tau}`.
pub fn select_by_threshold(w: &[f64], tau: f64) -> Vec<usize> {
    if !tau.is_finite() {
        return Vec::new();
    }
    (0..w.len()).filter(|&j| w[j] >= tau).collect()
}

/// Keeps `j` when the fraction of folds selecting it is at least `ratio`.
/// Returns the selection and the per-action vote counts.
pub fn majority_vote(selections: &[Vec<usize>], p: usize, ratio: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    let k = selections.len();
    if k == 0 {
        return Err(Error::InvalidConfig("majority vote needs at least one fold".into()));
    }
    let mut votes = vec![0usize; p];
    for sel in selections {
        for &j in sel {
            if j >= p {
                return Err(Error::InvalidConfig(format!("selected index {j} out of range")));
            }
            votes[j] += 1;
        }
    }
    let selected = (0..p)
        .filter(|&j| votes[j] as f64 / k as f64 >= ratio)
        .collect();
    Ok((selected, votes))
}
