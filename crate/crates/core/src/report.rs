//! Flat-file emission: headered CSV for anything tabular, JSON for the
//! parameters and diagnostics that produced it.
//!
//! Schemas are stable. Band files carry exactly the columns t (or t1,t0 for
//! treatment-effect pairs), center, sigma, lower, upper; curve files carry
//! t, g_hat, gprime_hat; weight files carry index, t, weight. Experiment
//! reports emit one CSV row per cell, arm, and level so reruns diff cleanly
//! against the reference table layout. All writers are generic over
//! `io::Write`, so callers decide whether output lands in a file or a
//! buffer, and identical inputs produce identical bytes.

use std::io::Write;

use serde::Serialize;

use crate::bands::{BandAxis, BandEstimate, BootstrapEnsemble, ScaleMethod, WeightsMode};
use crate::error::Result;
use crate::local::CurveEstimate;
use crate::loss::Loss;
use crate::simulation::{BiasRow, ExperimentReport, RateRow};

/// Band sidecar: the parameters behind a band file.
#[derive(Debug, Clone, Serialize)]
pub struct BandMeta {
    pub alpha: f64,
    pub c_alpha: f64,
    /// Requested bootstrap replications.
    pub b: usize,
    pub scale_method: ScaleMethod,
    pub seed: u64,
    pub h: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k1: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k2: Option<usize>,
    pub dropped_replicates: usize,
}

impl BandMeta {
    pub fn new(band: &BandEstimate, ensemble: &BootstrapEnsemble, mode: WeightsMode) -> Self {
        let (k1, k2) = match mode {
            WeightsMode::Sieve(cfg) => (Some(cfg.k1), Some(cfg.k2)),
            WeightsMode::Naive => (None, None),
        };
        BandMeta {
            alpha: band.alpha,
            c_alpha: band.c_alpha,
            b: ensemble.b,
            scale_method: band.method,
            seed: ensemble.seed,
            h: ensemble.center.h,
            k1,
            k2,
            dropped_replicates: ensemble.dropped.len(),
        }
    }
}

/// Curve sidecar: loss and bandwidth behind a curve file.
#[derive(Debug, Clone, Serialize)]
pub struct CurveMeta {
    pub loss: Loss,
    pub h: f64,
}

impl CurveMeta {
    pub fn new(curve: &CurveEstimate) -> Self {
        CurveMeta {
            loss: curve.loss,
            h: curve.h,
        }
    }
}

/// Band CSV: t (or t1,t0), center, sigma, lower, upper.
pub fn write_band_csv<W: Write>(w: W, band: &BandEstimate) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    match &band.grid {
        BandAxis::Points(ts) => {
            wtr.write_record(["t", "center", "sigma", "lower", "upper"])?;
            for (i, &t) in ts.iter().enumerate() {
                wtr.serialize((t, band.center[i], band.sigma[i], band.lower[i], band.upper[i]))?;
            }
        }
        BandAxis::Pairs(pairs) => {
            wtr.write_record(["t1", "t0", "center", "sigma", "lower", "upper"])?;
            for (i, &(t1, t0)) in pairs.iter().enumerate() {
                wtr.serialize((
                    t1,
                    t0,
                    band.center[i],
                    band.sigma[i],
                    band.lower[i],
                    band.upper[i],
                ))?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Curve CSV: t, g_hat, gprime_hat.
pub fn write_curve_csv<W: Write>(w: W, curve: &CurveEstimate) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["t", "g_hat", "gprime_hat"])?;
    for (i, &t) in curve.grid.iter().enumerate() {
        wtr.serialize((t, curve.g[i], curve.gprime[i]))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Weight diagnostics CSV: index, t, weight.
pub fn write_weights_csv<W: Write>(w: W, t: &[f64], weights: &[f64]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["index", "t", "weight"])?;
    for (i, (&ti, &wi)) in t.iter().zip(weights).enumerate() {
        wtr.serialize((i, ti, wi))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Coverage/rejection rows, one per cell, arm, and level.
pub fn write_rate_csv<W: Write>(w: W, rows: &[RateRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Bias/variance rows, one per cell, arm, and target.
pub fn write_bias_csv<W: Write>(w: W, rows: &[BiasRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Experiment CSV dispatching on the report kind.
pub fn write_experiment_csv<W: Write>(w: W, report: &ExperimentReport) -> Result<()> {
    if report.kind == "bias_variance" {
        write_bias_csv(w, &report.bias_rows)
    } else {
        write_rate_csv(w, &report.rows)
    }
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<W: Write, T: Serialize>(mut w: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
