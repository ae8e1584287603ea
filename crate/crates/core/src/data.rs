//! Observed data: outcome, continuous treatment, and covariates.
//!
//! A `Dataset` stores n samples of (Y, T, X) with X of shared width d_X.
//! Covariates are kept on their raw scale here; min-max normalization for
//! basis construction happens inside the sieve module so weight evaluation
//! at new points reuses the fitted ranges.

use crate::error::{Error, Result};
use crate::stats;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Dataset {
    y: Vec<f64>,
    t: Vec<f64>,
    /// Row-major n × d_x covariate block.
    x: Vec<f64>,
    dx: usize,
}

impl Dataset {
    /// Assemble a dataset from per-sample covariate rows.
    pub fn new(y: Vec<f64>, t: Vec<f64>, x_rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 samples, got {n}"
            )));
        }
        if t.len() != n || x_rows.len() != n {
            return Err(Error::InvalidInput(format!(
                "column lengths differ: y={}, t={}, x={}",
                n,
                t.len(),
                x_rows.len()
            )));
        }
        let dx = x_rows[0].len();
        if dx == 0 {
            return Err(Error::InvalidInput(
                "at least one covariate column is required".into(),
            ));
        }
        let mut x = Vec::with_capacity(n * dx);
        for (i, row) in x_rows.iter().enumerate() {
            if row.len() != dx {
                return Err(Error::InvalidInput(format!(
                    "covariate row {i} has {} entries, expected {dx}",
                    row.len()
                )));
            }
            x.extend_from_slice(row);
        }
        let ds = Dataset { y, t, x, dx };
        ds.check_finite()?;
        Ok(ds)
    }

    fn check_finite(&self) -> Result<()> {
        for (name, col) in [("y", &self.y), ("t", &self.t), ("x", &self.x)] {
            if let Some(pos) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "non-finite value in column {name} at flat index {pos}"
                )));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dx(&self) -> usize {
        self.dx
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dx..(i + 1) * self.dx]
    }

    /// Restrict to the given sample indices (used by CV folds).
    pub fn subset(&self, keep: &[usize]) -> Dataset {
        let mut y = Vec::with_capacity(keep.len());
        let mut t = Vec::with_capacity(keep.len());
        let mut x = Vec::with_capacity(keep.len() * self.dx);
        for &i in keep {
            y.push(self.y[i]);
            t.push(self.t[i]);
            x.extend_from_slice(self.x_row(i));
        }
        Dataset {
            y,
            t,
            x,
            dx: self.dx,
        }
    }

    /// Equispaced grid of `count` points spanning [q_lo(T), q_hi(T)].
    pub fn treatment_grid(&self, count: usize, q_lo: f64, q_hi: f64) -> Vec<f64> {
        assert!(count >= 1 && q_lo < q_hi);
        let lo = stats::interpolated_quantile(&self.t, q_lo);
        let hi = stats::interpolated_quantile(&self.t, q_hi);
        equispaced(lo, hi, count)
    }

    /// Default grid: 25 equispaced points on [q05(T), q95(T)].
    pub fn default_grid(&self) -> Vec<f64> {
        self.treatment_grid(25, 0.05, 0.95)
    }
}

/// `count` equispaced points from `lo` to `hi` inclusive.
pub fn equispaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![0.5 * (lo + hi)];
    }
    let step = (hi - lo) / (count - 1) as f64;
    (0..count).map(|k| lo + step * k as f64).collect()
}

/// Monotone transforms for the outcome or treatment column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    None,
    /// ln(v + offset).
    Log { offset: f64 },
    /// Box-Cox: ((v + lambda2)^lambda1 - 1) / lambda1; lambda1 = 0 falls back to log.
    BoxCox { lambda1: f64, lambda2: f64 },
}

impl Transform {
    pub fn apply(&self, values: &[f64], column: &str) -> Result<Vec<f64>> {
        match *self {
            Transform::None => Ok(values.to_vec()),
            Transform::Log { offset } => values
                .iter()
                .map(|&v| {
                    let shifted = v + offset;
                    if shifted <= 0.0 {
                        Err(Error::InvalidInput(format!(
                            "log transform of column {column}: value {v} + offset {offset} is not positive"
                        )))
                    } else {
                        Ok(shifted.ln())
                    }
                })
                .collect(),
            Transform::BoxCox { lambda1, lambda2 } => values
                .iter()
                .map(|&v| {
                    let shifted = v + lambda2;
                    if shifted <= 0.0 {
                        Err(Error::InvalidInput(format!(
                            "Box-Cox transform of column {column}: value {v} + lambda2 {lambda2} is not positive"
                        )))
                    } else if lambda1 == 0.0 {
                        Ok(shifted.ln())
                    } else {
                        Ok((shifted.powf(lambda1) - 1.0) / lambda1)
                    }
                })
                .collect(),
        }
    }
}

/// Column mapping for CSV ingestion. Empty `x` means "all other columns".
#[derive(Debug, Clone)]
pub struct ColumnSpec {
    pub y: String,
    pub t: String,
    pub x: Vec<String>,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        ColumnSpec {
            y: "y".into(),
            t: "t".into(),
            x: Vec::new(),
        }
    }
}

/// Read a headered CSV file into a dataset.
pub fn read_csv(path: &Path, columns: &ColumnSpec) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::InvalidInput(format!(
                "column '{name}' not found; header has: {}",
                headers.join(", ")
            ))
        })
    };
    let y_idx = find(&columns.y)?;
    let t_idx = find(&columns.t)?;
    let x_idx: Vec<usize> = if columns.x.is_empty() {
        (0..headers.len())
            .filter(|&i| i != y_idx && i != t_idx)
            .collect()
    } else {
        columns
            .x
            .iter()
            .map(|name| find(name))
            .collect::<Result<Vec<_>>>()?
    };
    if x_idx.is_empty() {
        return Err(Error::InvalidInput(
            "no covariate columns found besides y and t".into(),
        ));
    }

    let mut y = Vec::new();
    let mut t = Vec::new();
    let mut x_rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |idx: usize| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("");
            raw.trim().parse::<f64>().map_err(|_| {
                Error::InvalidInput(format!(
                    "line {} column '{}': cannot parse '{}' as a number",
                    line + 2,
                    headers[idx],
                    raw
                ))
            })
        };
        y.push(parse(y_idx)?);
        t.push(parse(t_idx)?);
        x_rows.push(x_idx.iter().map(|&i| parse(i)).collect::<Result<Vec<_>>>()?);
    }
    Dataset::new(y, t, x_rows)
}
