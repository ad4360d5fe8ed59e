//! Verification metrics: RMSE, Pearson R, cumulative accuracy profiles,
//! correlation matrices and per-region scores, plus CSV/SVG reporting.

mod report;

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthworld::GridField;

pub use report::{emit_report, CapCurve, Report, RegionRow};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty series")]
    EmptySeries,
    #[error("region '{0}' is empty")]
    EmptyRegion(String),
    #[error("region '{name}' exceeds the {height}x{width} grid")]
    RegionOutOfBounds { name: String, height: usize, width: usize },
    #[error("cannot write report to {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn same_dims(a: &GridField, b: &GridField) -> Result<()> {
    if a.dims() == b.dims() {
        Ok(())
    } else {
        Err(EvalError::Shape(a.dims(), b.dims()))
    }
}

/// RMSE between two equally long slices.
pub fn rmse_values(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(EvalError::Length(truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(EvalError::EmptySeries);
    }
    let sse: f64 = truth.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / truth.len() as f64).sqrt())
}

/// Pearson correlation of two slices; `None` if either is constant.
pub fn corrcoef_values(truth: &[f64], pred: &[f64]) -> Result<Option<f64>> {
    if truth.len() != pred.len() {
        return Err(EvalError::Length(truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(EvalError::EmptySeries);
    }
    let n = truth.len() as f64;
    let ma = truth.iter().sum::<f64>() / n;
    let mb = pred.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in truth.iter().zip(pred) {
        let (da, db) = (a - ma, b - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(None);
    }
    Ok(Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)))
}

pub fn rmse(truth: &GridField, pred: &GridField) -> Result<f64> {
    same_dims(truth, pred)?;
    rmse_values(truth.values(), pred.values())
}

/// Pearson R over all cells; `None` (undefined) if either field is constant.
pub fn corrcoef(truth: &GridField, pred: &GridField) -> Result<Option<f64>> {
    same_dims(truth, pred)?;
    corrcoef_values(truth.values(), pred.values())
}

/// Which side of the threshold counts as a hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapDirection {
    /// `value <= threshold` (for RMSE).
    Below,
    /// `value > threshold` (for R).
    Above,
}

/// Percentage of series entries beating each threshold.
pub fn cap_profile(series: &[f64], thresholds: &[f64], direction: CapDirection) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(EvalError::EmptySeries);
    }
    let k = series.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&th| {
            let hits = series
                .iter()
                .filter(|&&v| match direction {
                    CapDirection::Below => v <= th,
                    CapDirection::Above => v > th,
                })
                .count();
            100.0 * hits as f64 / k
        })
        .collect())
}

/// Sorted unique values of the series.
pub fn exact_thresholds(series: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = series.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// `points` evenly spaced thresholds spanning the series' min..max.
pub fn dense_thresholds(series: &[f64], points: usize) -> Vec<f64> {
    let v = exact_thresholds(series);
    let (Some(&lo), Some(&hi)) = (v.first(), v.last()) else {
        return Vec::new();
    };
    if points < 2 || lo == hi {
        return vec![lo];
    }
    (0..points)
        .map(|i| if i + 1 == points { hi } else { lo + (hi - lo) * i as f64 / (points - 1) as f64 })
        .collect()
}

/// One verified instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    pub time_index: usize,
    pub rmse: f64,
    /// `None` when R is undefined (constant field).
    pub r: Option<f64>,
}

/// Per-instance RMSE and R of one experiment and variable.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSeries {
    pub experiment: String,
    pub variable: String,
    pub records: Vec<MetricRecord>,
}

impl MetricSeries {
    pub fn new(experiment: impl Into<String>, variable: impl Into<String>) -> Self {
        Self {
            experiment: experiment.into(),
            variable: variable.into(),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, time_index: usize, truth: &GridField, pred: &GridField) -> Result<()> {
        self.records.push(MetricRecord {
            time_index,
            rmse: rmse(truth, pred)?,
            r: corrcoef(truth, pred)?,
        });
        Ok(())
    }

    pub fn rmse_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.rmse).collect()
    }

    /// Defined R values only.
    pub fn r_values(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.r).collect()
    }

    pub fn mean_rmse(&self) -> Option<f64> {
        mean(&self.rmse_values())
    }

    pub fn mean_r(&self) -> Option<f64> {
        mean(&self.r_values())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Fraction of shared time indices where `a` has strictly lower RMSE than `b`.
pub fn win_rate(a: &MetricSeries, b: &MetricSeries) -> Option<f64> {
    let lookup: std::collections::HashMap<usize, f64> = b.records.iter().map(|r| (r.time_index, r.rmse)).collect();
    let mut wins = 0usize;
    let mut total = 0usize;
    for r in &a.records {
        if let Some(&other) = lookup.get(&r.time_index) {
            total += 1;
            wins += (r.rmse < other) as usize;
        }
    }
    (total > 0).then(|| wins as f64 / total as f64)
}

/// Symmetric matrix of pairwise Pearson R; `None` entries are undefined.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        self.values[i][j]
    }
}

/// Pairwise R over all cells and times of equally shaped field stacks.
pub fn correlation_matrix(channels: &[(String, Vec<GridField>)]) -> Result<CorrelationMatrix> {
    let flat: Vec<Vec<f64>> = channels
        .iter()
        .map(|(_, stack)| stack.iter().flat_map(|f| f.values().iter().copied()).collect())
        .collect();
    if let Some((_, first)) = channels.first() {
        for (_, stack) in channels {
            if stack.len() != first.len() {
                return Err(EvalError::Length(first.len(), stack.len()));
            }
            for (a, b) in first.iter().zip(stack) {
                same_dims(a, b)?;
            }
        }
    }
    let n = channels.len();
    let mut values = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let r = corrcoef_values(&flat[i], &flat[j])?;
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix {
        names: channels.iter().map(|(n, _)| n.clone()).collect(),
        values,
    })
}

/// Named rectangle of rows (latitude) and columns (longitude).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSet {
    pub regions: Vec<Region>,
}

impl RegionSet {
    pub fn whole(height: usize, width: usize) -> Self {
        Self {
            regions: vec![Region {
                name: "global".into(),
                rows: 0..height,
                cols: 0..width,
            }],
        }
    }

    /// Two latitude bands by four longitude quadrants.
    pub fn default_boxes(height: usize, width: usize) -> Self {
        let mut regions = Vec::new();
        let rows = [("shem", 0..height / 2), ("nhem", height / 2..height)];
        for (band, r) in rows {
            for q in 0..4 {
                regions.push(Region {
                    name: format!("{band}-q{}", q + 1),
                    rows: r.clone(),
                    cols: q * width / 4..(q + 1) * width / 4,
                });
            }
        }
        Self { regions }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        for r in &self.regions {
            if r.rows.is_empty() || r.cols.is_empty() {
                return Err(EvalError::EmptyRegion(r.name.clone()));
            }
            if r.rows.end > height || r.cols.end > width {
                return Err(EvalError::RegionOutOfBounds {
                    name: r.name.clone(),
                    height,
                    width,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMetrics {
    pub name: String,
    pub cells: usize,
    pub rmse: f64,
    pub r: Option<f64>,
}

pub fn regional_eval(truth: &GridField, pred: &GridField, regions: &RegionSet) -> Result<Vec<RegionMetrics>> {
    same_dims(truth, pred)?;
    let (h, w) = truth.dims();
    regions.validate(h, w)?;
    regions
        .regions
        .iter()
        .map(|reg| {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for i in reg.rows.clone() {
                for j in reg.cols.clone() {
                    a.push(truth.get(i, j));
                    b.push(pred.get(i, j));
                }
            }
            Ok(RegionMetrics {
                name: reg.name.clone(),
                cells: a.len(),
                rmse: rmse_values(&a, &b)?,
                r: corrcoef_values(&a, &b)?,
            })
        })
        .collect()
}
