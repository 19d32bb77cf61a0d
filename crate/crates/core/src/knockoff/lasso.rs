//! Cyclic coordinate-descent LASSO on standardized columns.
//!
//! Minimizes `(1/2n) |y_c - Z b|^2 + lambda |b|_1` where `Z` holds the columns
//! of `X` centered and scaled to unit mean square, and `y_c` is `y` centered.
//! Coefficients are reported on the standardized scale; see
//! [`LassoFit::unstandardized`] for the original scale.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nn::dot;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_SWEEPS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    /// Standardized-scale coefficients.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub converged: bool,
    pub n_iter: usize,
    means: Vec<f64>,
    scales: Vec<f64>,
}

impl LassoFit {
    /// Coefficients for the raw (uncentered, unscaled) columns.
    pub fn unstandardized(&self) -> Vec<f64> {
        self.coefficients
            .iter()
            .zip(&self.scales)
            .map(|(&b, &s)| if s > 0.0 { b / s } else { 0.0 })
            .collect()
    }

    pub fn column_means(&self) -> &[f64] {
        &self.means
    }

    pub fn column_scales(&self) -> &[f64] {
        &self.scales
    }
}

/// How the penalty is chosen for each fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum LambdaRule {
    /// `lambda = f * lambda_max`, where `lambda_max = max_j |z_j' y_c| / n`.
    FractionOfMax(f64),
    Fixed(f64),
}

impl Default for LambdaRule {
    fn default() -> Self {
        LambdaRule::FractionOfMax(0.1)
    }
}

impl LambdaRule {
    pub fn resolve(self, lambda_max: f64) -> f64 {
        match self {
            LambdaRule::FractionOfMax(f) => f * lambda_max,
            LambdaRule::Fixed(l) => l,
        }
    }

    pub fn validate(self) -> Result<()> {
        let v = match self {
            LambdaRule::FractionOfMax(f) => f,
            LambdaRule::Fixed(l) => l,
        };
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidConfig(format!("invalid lambda rule {self:?}")));
        }
        Ok(())
    }
}

/// Column-standardized design shared across several responses.
#[derive(Debug, Clone)]
pub(crate) struct Design {
    n: usize,
    columns: Vec<Vec<f64>>,
    col_sq: Vec<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
    order: Vec<usize>,
}

impl Design {
    pub(crate) fn from_columns<'a, I>(columns: I, n: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut cols = Vec::new();
        let mut col_sq = Vec::new();
        let mut means = Vec::new();
        let mut scales = Vec::new();
        for raw in columns {
            check_len("design column", n, raw.len())?;
            if raw.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("design matrix"));
            }
            let mean = raw.iter().sum::<f64>() / n as f64;
            let scale = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            let z: Vec<f64> = if scale > 0.0 {
                raw.iter().map(|v| (v - mean) / scale).collect()
            } else {
                vec![0.0; n]
            };
            col_sq.push(dot(&z, &z) / n as f64);
            cols.push(z);
            means.push(mean);
            scales.push(scale);
        }
        let order = (0..cols.len()).collect();
        Ok(Self {
            n,
            columns: cols,
            col_sq,
            means,
            scales,
            order,
        })
    }

    pub(crate) fn set_order(&mut self, order: Vec<usize>) {
        debug_assert_eq!(order.len(), self.columns.len());
        self.order = order;
    }

    fn lambda_max(&self, yc: &[f64]) -> f64 {
        self.columns
            .iter()
            .map(|z| (dot(z, yc) / self.n as f64).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn fit(
        &self,
        y: &[f64],
        rule: LambdaRule,
        tol: f64,
        max_sweeps: usize,
    ) -> Result<LassoFit> {
        check_len("lasso response", self.n, y.len())?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("lasso response"));
        }
        let n = self.n as f64;
        let y_mean = y.iter().sum::<f64>() / n;
        let yc: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
        let lambda = rule.resolve(self.lambda_max(&yc));

        let q = self.columns.len();
        let mut beta = vec![0.0; q];
        let mut resid = yc;
        let mut converged = false;
        let mut sweeps = 0;
        while sweeps < max_sweeps {
            sweeps += 1;
            let mut max_change: f64 = 0.0;
            for &j in &self.order {
                let c = self.col_sq[j];
                if c == 0.0 {
                    continue;
                }
                let z = &self.columns[j];
                let rho = dot(z, &resid) / n + c * beta[j];
                let updated = soft_threshold(rho, lambda) / c;
                let delta = updated - beta[j];
                if delta != 0.0 {
                    for (r, zi) in resid.iter_mut().zip(z) {
                        *r -= delta * zi;
                    }
                    beta[j] = updated;
                    max_change = max_change.max(delta.abs());
                }
            }
            if max_change < tol {
                converged = true;
                break;
            }
        }

        let intercept = y_mean
            - beta
                .iter()
                .zip(self.means.iter().zip(&self.scales))
                .map(|(&b, (&m, &s))| if s > 0.0 { b * m / s } else { 0.0 })
                .sum::<f64>();
        Ok(LassoFit {
            coefficients: beta,
            intercept,
            lambda,
            converged,
            n_iter: sweeps,
            means: self.means.clone(),
            scales: self.scales.clone(),
        })
    }
}

#[inline]
pub fn soft_threshold(x: f64, lambda: f64) -> f64 {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        0.0
    }
}

fn columns_of(x: &DMatrix<f64>) -> Vec<&[f64]> {
    // nalgebra storage is column-major, so each column is contiguous.
    let n = x.nrows();
    x.as_slice().chunks(n.max(1)).take(x.ncols()).collect()
}

fn check_problem(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<()> {
    if x.nrows() < 2 {
        return Err(Error::InsufficientData("lasso needs at least 2 rows".into()));
    }
    check_len("lasso response", x.nrows(), y.len())?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("invalid lambda {lambda}")));
    }
    Ok(())
}

/// LASSO fit with a fixed penalty, cyclic order over columns, tolerance
/// `1e-10` on the largest coefficient change and at most `10^4` sweeps.
pub fn lasso_cd(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<LassoFit> {
    lasso_cd_with(x, y, LambdaRule::Fixed(lambda), DEFAULT_TOL, DEFAULT_MAX_SWEEPS)
}

pub fn lasso_cd_with(
    x: &DMatrix<f64>,
    y: &[f64],
    rule: LambdaRule,
    tol: f64,
    max_sweeps: usize,
) -> Result<LassoFit> {
    rule.validate()?;
    check_problem(x, y, rule.resolve(0.0))?;
    let design = Design::from_columns(columns_of(x), x.nrows())?;
    design.fit(y, rule, tol, max_sweeps)
}

/// Largest violation of the LASSO subgradient conditions on the standardized
/// problem the fit solved.
pub fn kkt_residual(x: &DMatrix<f64>, y: &[f64], fit: &LassoFit) -> Result<f64> {
    let design = Design::from_columns(columns_of(x), x.nrows())?;
    let n = x.nrows() as f64;
    let y_mean = y.iter().sum::<f64>() / n;
    let mut resid: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    for (z, &b) in design.columns.iter().zip(&fit.coefficients) {
        if b != 0.0 {
            for (r, zi) in resid.iter_mut().zip(z) {
                *r -= b * zi;
            }
        }
    }
    let mut worst: f64 = 0.0;
    for (j, z) in design.columns.iter().enumerate() {
        if design.col_sq[j] == 0.0 {
            continue;
        }
        let g = dot(z, &resid) / n;
        let b = fit.coefficients[j];
        let violation = if b == 0.0 {
            (g.abs() - fit.lambda).max(0.0)
        } else {
            (g - fit.lambda * b.signum()).abs()
        };
        worst = worst.max(violation);
    }
    Ok(worst)
}

/// Lexicographic comparison of two raw columns under IEEE total order.
pub(crate) fn compare_columns(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    a.len().cmp(&b.len())
}
