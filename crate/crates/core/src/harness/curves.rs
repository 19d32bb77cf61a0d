use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ppo::EvalRecord;

/// Seed-averaged learning curve point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub method: String,
    pub step: usize,
    pub mean: f64,
    /// Sample standard deviation over seeds divided by `sqrt(n)`.
    pub stderr: f64,
    pub n: usize,
}

/// Aligns runs per method onto the union of their evaluation steps. A run
/// without a record at some step holds its last earlier value (or its first
/// value before it starts).
pub fn emit_curves(runs: &[(String, Vec<EvalRecord>)]) -> Vec<CurvePoint> {
    let mut by_method: BTreeMap<&str, Vec<&[EvalRecord]>> = BTreeMap::new();
    for (method, log) in runs {
        if !log.is_empty() {
            by_method.entry(method.as_str()).or_default().push(log);
        }
    }
    let mut out = Vec::new();
    for (method, logs) in by_method {
        let mut grid: Vec<usize> = logs.iter().flat_map(|l| l.iter().map(|r| r.step)).collect();
        grid.sort_unstable();
        grid.dedup();
        for step in grid {
            let values: Vec<f64> = logs.iter().map(|l| value_at(l, step)).collect();
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let stderr = if n < 2 {
                0.0
            } else {
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                (var / n as f64).sqrt()
            };
            out.push(CurvePoint {
                method: method.to_string(),
                step,
                mean,
                stderr,
                n,
            });
        }
    }
    out
}

fn value_at(log: &[EvalRecord], step: usize) -> f64 {
    let idx = log.partition_point(|r| r.step <= step);
    if idx == 0 {
        log[0].mean_return
    } else {
        log[idx - 1].mean_return
    }
}

pub fn write_curves_csv(path: impl AsRef<Path>, points: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_log(path: impl AsRef<Path>, log: &[EvalRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in log {
        serde_json::to_writer(&mut f, rec)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
