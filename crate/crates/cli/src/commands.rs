//! The six workflows behind the subcommands. Each one loads what it needs,
//! delegates the statistics to the library, writes its CSV outputs, and
//! finishes with a meta.json carrying the resolved configuration, its hash,
//! and the effective parameters the run actually used.

use std::fs::File;
use std::path::PathBuf;

use serde_json::{json, Value};

use drband::bands::{self, BandEstimate, WeightsMode};
use drband::report::{self, BandMeta, CurveMeta};
use drband::simulation::{
    self, BandMethod, CellSpec, SimProtocol,
};
use drband::tuning::{self, CvGrid, UndersmoothConfig};
use drband::weights::WeightSet;
use drband::local::estimate_curve_with;
use drband::{diagnose_basis, min_variance_weights, Basis, Dataset, Error, KernelConfig};

use crate::config::{Resolved, TuningMode};
use crate::{out_path, CliError};

/// Candidate count for the CV bandwidth grid.
const H_GRID_POINTS: usize = 8;

/// Write meta.json: provenance plus command-specific extras.
fn write_meta(r: &Resolved, command: &str, extra: Value) -> Result<(), CliError> {
    let mut meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": r.seed,
        "config_sha256": r.sha256()?,
        "resolved": r,
    });
    if let (Some(obj), Some(add)) = (meta.as_object_mut(), extra.as_object()) {
        for (k, v) in add {
            obj.insert(k.clone(), v.clone());
        }
    }
    let file = File::create(out_path(r, "meta.json"))?;
    report::write_json(file, &meta)?;
    Ok(())
}

fn center_weights(ds: &Dataset, mode: WeightsMode) -> Result<WeightSet, CliError> {
    match mode {
        WeightsMode::Sieve(cfg) => Ok(min_variance_weights(ds, &cfg)?),
        WeightsMode::Naive => Ok(WeightSet::naive(ds.n())),
    }
}

/// Resolve the bandwidth per the tuning mode; returns the bandwidth and a
/// JSON block describing how it was chosen.
fn resolve_bandwidth(
    r: &Resolved,
    ds: &Dataset,
    grid: &[f64],
) -> Result<(f64, Value), CliError> {
    let mode = r.weights_mode();
    let policy = r.mass_policy();
    if r.tuning == TuningMode::Fixed {
        let h = r.h.expect("validated at config build");
        return Ok((h, json!({ "mode": "fixed", "h": h })));
    }
    let cv = CvGrid::over_bandwidths(
        r.k1,
        r.k2,
        tuning::default_h_grid(ds, H_GRID_POINTS),
        r.folds,
    )?;
    let pilot = tuning::select_pilot_with(ds, Some(mode), &cv, r.loss, r.seed, policy)?;
    match r.tuning {
        TuningMode::Fixed => unreachable!(),
        TuningMode::Cv => Ok((
            pilot.h_tilde,
            json!({ "mode": "cv", "h_tilde": pilot.h_tilde, "score": pilot.score }),
        )),
        TuningMode::Undersmooth => {
            let ucfg = UndersmoothConfig {
                j: tuning::DEFAULT_J,
                j_override: None,
                policy,
            };
            let res = tuning::undersmooth_bandwidth_with(
                ds, mode, r.loss, grid, pilot.h_tilde, r.target, &ucfg,
            )?;
            Ok((
                res.h_u,
                json!({
                    "mode": "undersmooth",
                    "h_tilde": pilot.h_tilde,
                    "h0": res.h0,
                    "chosen_j": res.chosen_j,
                    "h": res.h_u,
                }),
            ))
        }
        TuningMode::Lepski => {
            let lcfg = tuning::lepski_candidates(ds.n(), pilot.h_tilde, r.target)?;
            let run = tuning::lepski_run(
                ds,
                mode,
                r.loss,
                grid,
                &lcfg,
                r.bootstrap_or(bands::DEFAULT_B),
                r.seed,
                r.target,
                policy,
                &[],
            )?;
            Ok((
                run.h_hat,
                json!({
                    "mode": "lepski",
                    "h_tilde": pilot.h_tilde,
                    "h": run.h_hat,
                    "c_tilde": run.c_tilde,
                    "fallback": run.diagnostics.fallback,
                }),
            ))
        }
    }
}

pub fn cmd_estimate(r: &Resolved) -> Result<(), CliError> {
    let ds = r.load_dataset()?;
    let grid = r.eval_grid(&ds)?;
    let (h, tuning_block) = resolve_bandwidth(r, &ds, &grid)?;
    let k = KernelConfig::new(h)?;
    let w = center_weights(&ds, r.weights_mode())?;
    let curve = estimate_curve_with(&ds, &w, r.loss, &grid, &k, r.mass_policy())?;
    report::write_curve_csv(File::create(out_path(r, "curve.csv"))?, &curve)?;
    write_meta(
        r,
        "estimate",
        json!({
            "tuning_result": tuning_block,
            "curve": CurveMeta::new(&curve),
            "n": ds.n(),
            "grid_points": grid.len(),
        }),
    )
}

/// Per-level band file name: band.csv for a single level, band_<pct>.csv
/// otherwise.
fn band_file_name(levels: &[f64], level: f64) -> String {
    if levels.len() == 1 {
        "band.csv".into()
    } else {
        format!("band_{}.csv", (level * 100.0).round() as u32)
    }
}

struct BandRun {
    bands: Vec<(f64, BandEstimate, String)>,
    h: f64,
    tuning_block: Value,
    metas: Vec<Value>,
}

/// Shared band pipeline for cmd_band and cmd_test.
fn run_bands(r: &Resolved, ds: &Dataset, grid: &[f64]) -> Result<BandRun, CliError> {
    let levels = r.levels_or(&[0.95]);
    let mode = r.weights_mode();
    let b = r.bootstrap_or(bands::DEFAULT_B);
    if r.tuning == TuningMode::Lepski {
        // Lepski couples selection and band: the critical value carries the
        // adaptation penalty, so bands come from the run itself.
        let cv = CvGrid::over_bandwidths(
            r.k1,
            r.k2,
            tuning::default_h_grid(ds, H_GRID_POINTS),
            r.folds,
        )?;
        let pilot = tuning::select_pilot_with(ds, Some(mode), &cv, r.loss, r.seed, r.mass_policy())?;
        let lcfg = tuning::lepski_candidates(ds.n(), pilot.h_tilde, r.target)?;
        let alphas: Vec<f64> = levels.iter().map(|&l| 1.0 - l).collect();
        let run = tuning::lepski_run(
            ds,
            mode,
            r.loss,
            grid,
            &lcfg,
            b,
            r.seed,
            r.target,
            r.mass_policy(),
            &alphas,
        )?;
        let (k1, k2) = match mode {
            WeightsMode::Sieve(cfg) => (Some(cfg.k1), Some(cfg.k2)),
            WeightsMode::Naive => (None, None),
        };
        let mut bands_out = Vec::new();
        let mut metas = Vec::new();
        for (i, band) in run.bands.iter().enumerate() {
            let name = band_file_name(&levels, levels[i]);
            metas.push(json!({
                "file": name,
                "meta": BandMeta {
                    alpha: band.alpha,
                    c_alpha: band.c_alpha,
                    b,
                    scale_method: band.method,
                    seed: r.seed,
                    h: run.h_hat,
                    k1,
                    k2,
                    dropped_replicates: run.diagnostics.dropped_replicates,
                },
            }));
            bands_out.push((levels[i], band.clone(), name));
        }
        Ok(BandRun {
            bands: bands_out,
            h: run.h_hat,
            tuning_block: json!({
                "mode": "lepski",
                "h_tilde": pilot.h_tilde,
                "h": run.h_hat,
                "c_tilde": run.c_tilde,
                "c_hats": run.c_hats,
                "fallback": run.diagnostics.fallback,
            }),
            metas,
        })
    } else {
        let (h, tuning_block) = resolve_bandwidth(r, ds, grid)?;
        let k = KernelConfig::new(h)?;
        let ens = bands::bootstrap_curves_with(
            ds,
            mode,
            r.loss,
            grid,
            &k,
            b,
            r.seed,
            r.mass_policy(),
            r.drop_frac(),
        )?;
        let mut bands_out = Vec::new();
        let mut metas = Vec::new();
        for &level in &levels {
            let band = bands::band_from_ensemble(&ens, r.target, 1.0 - level, r.scale)?;
            let name = band_file_name(&levels, level);
            metas.push(json!({
                "file": name,
                "meta": BandMeta::new(&band, &ens, mode),
            }));
            bands_out.push((level, band, name));
        }
        Ok(BandRun {
            bands: bands_out,
            h,
            tuning_block,
            metas,
        })
    }
}

pub fn cmd_band(r: &Resolved) -> Result<(), CliError> {
    let ds = r.load_dataset()?;
    let grid = r.eval_grid(&ds)?;
    let run = run_bands(r, &ds, &grid)?;
    for (_, band, name) in &run.bands {
        report::write_band_csv(File::create(out_path(r, name))?, band)?;
    }
    write_meta(
        r,
        "band",
        json!({
            "tuning_result": run.tuning_block,
            "h": run.h,
            "bands": run.metas,
            "n": ds.n(),
        }),
    )
}

/// Null curve: "zero", a constant, or file:PATH with one value per grid
/// point (an optional non-numeric first line is treated as a header).
fn parse_null(spec: &str, len: usize) -> Result<Vec<f64>, CliError> {
    if spec == "zero" {
        return Ok(vec![0.0; len]);
    }
    if let Ok(c) = spec.parse::<f64>() {
        return Ok(vec![c; len]);
    }
    if let Some(path) = spec.strip_prefix("file:") {
        let text = std::fs::read_to_string(PathBuf::from(path))?;
        let mut values = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            match line.parse::<f64>() {
                Ok(v) => values.push(v),
                Err(_) if i == 0 => continue,
                Err(_) => {
                    return Err(CliError::Core(Error::InvalidInput(format!(
                        "null file {path}: line {} is not numeric: '{line}'",
                        i + 1
                    ))))
                }
            }
        }
        return Ok(values);
    }
    Err(CliError::config(format!(
        "null spec '{spec}' must be zero, a constant, or file:PATH"
    )))
}

pub fn cmd_test(r: &Resolved, null_spec: &str) -> Result<(), CliError> {
    let ds = r.load_dataset()?;
    let grid = r.eval_grid(&ds)?;
    let run = run_bands(r, &ds, &grid)?;
    let axis_len = run.bands[0].1.grid.len();
    let null_values = parse_null(null_spec, axis_len)?;
    let mut results = Vec::new();
    for (level, band, name) in &run.bands {
        report::write_band_csv(File::create(out_path(r, name))?, band)?;
        let test = bands::test_uniform_null(band, &null_values)?;
        results.push(json!({
            "level": level,
            "alpha": band.alpha,
            "reject": test.reject,
            "violations": test.violations,
            "band_file": name,
        }));
    }
    let verdict = json!({
        "command": "test",
        "target": r.target,
        "null": null_spec,
        "h": run.h,
        "seed": r.seed,
        "results": results,
    });
    report::write_json(File::create(out_path(r, "verdict.json"))?, &verdict)?;
    write_meta(
        r,
        "test",
        json!({
            "tuning_result": run.tuning_block,
            "h": run.h,
            "null": null_spec,
            "bands": run.metas,
        }),
    )
}

pub fn cmd_tune(r: &Resolved) -> Result<(), CliError> {
    if r.tuning == TuningMode::Fixed {
        return Err(CliError::config(
            "--tuning fixed leaves nothing to tune".into(),
        ));
    }
    let ds = r.load_dataset()?;
    let grid = r.eval_grid(&ds)?;
    let mode = r.weights_mode();
    let policy = r.mass_policy();
    let cv = CvGrid::over_bandwidths(
        r.k1,
        r.k2,
        tuning::default_h_grid(&ds, H_GRID_POINTS),
        r.folds,
    )?;
    let pilot = tuning::select_pilot_with(&ds, Some(mode), &cv, r.loss, r.seed, policy)?;
    let mut tuning_json = json!({ "pilot": pilot });
    let obj = tuning_json.as_object_mut().expect("object literal");
    let chosen_h;
    match r.tuning {
        TuningMode::Cv | TuningMode::Fixed => {
            chosen_h = pilot.h_tilde;
        }
        TuningMode::Undersmooth => {
            let ucfg = UndersmoothConfig {
                j: tuning::DEFAULT_J,
                j_override: None,
                policy,
            };
            let res = tuning::undersmooth_bandwidth_with(
                &ds, mode, r.loss, &grid, pilot.h_tilde, r.target, &ucfg,
            )?;
            // Profile CSV for plotting: one row per ladder step with a
            // distance (j >= 1).
            let mut wtr = csv::Writer::from_writer(File::create(out_path(r, "profile.csv"))?);
            wtr.write_record(["j", "h", "distance"])
                .map_err(Error::from)?;
            for (i, &d) in res.distance_profile.iter().enumerate() {
                wtr.serialize((i + 1, res.ladder[i + 1], d))
                    .map_err(Error::from)?;
            }
            wtr.flush().map_err(drband::Error::from)?;
            chosen_h = res.h_u;
            obj.insert("undersmooth".into(), serde_json::to_value(&res).map_err(Error::from)?);
        }
        TuningMode::Lepski => {
            let lcfg = tuning::lepski_candidates(ds.n(), pilot.h_tilde, r.target)?;
            let alphas: Vec<f64> = r.levels_or(&[0.95]).iter().map(|&l| 1.0 - l).collect();
            let run = tuning::lepski_run(
                &ds,
                mode,
                r.loss,
                &grid,
                &lcfg,
                r.bootstrap_or(bands::DEFAULT_B),
                r.seed,
                r.target,
                policy,
                &alphas,
            )?;
            chosen_h = run.h_hat;
            obj.insert(
                "lepski".into(),
                json!({
                    "config": lcfg,
                    "h_hat": run.h_hat,
                    "c_tilde": run.c_tilde,
                    "c_hats": run.c_hats,
                    "diagnostics": run.diagnostics,
                }),
            );
        }
    }
    obj.insert("h".into(), json!(chosen_h));
    report::write_json(File::create(out_path(r, "tuning.json"))?, &tuning_json)?;
    write_meta(r, "tune", json!({ "h": chosen_h, "mode": r.tuning }))
}

fn preset_experiment(preset: &str) -> Result<(&'static str, BandMethod), CliError> {
    match preset {
        "table1" => Ok(("coverage", BandMethod::Undersmooth)),
        "table2" => Ok(("coverage", BandMethod::Lepski)),
        "table3" => Ok(("rejection", BandMethod::Undersmooth)),
        "table4" => Ok(("rejection", BandMethod::Lepski)),
        "table5" => Ok(("bias_variance", BandMethod::Undersmooth)),
        "table6" => Ok(("bias_variance", BandMethod::Lepski)),
        other => Err(CliError::config(format!(
            "unknown preset '{other}' (expected table1..table6)"
        ))),
    }
}

pub fn cmd_simulate(
    r: &Resolved,
    preset: &str,
    dgp: Option<&str>,
    n: Option<usize>,
    loss_kind: Option<&str>,
    reps: Option<usize>,
) -> Result<(), CliError> {
    let (kind, band_method) = preset_experiment(preset)?;
    let dgp_filter = match dgp {
        Some(s) => Some(s.parse::<simulation::Dgp>()?),
        None => None,
    };
    let cells: Vec<CellSpec> = simulation::all_cells()
        .into_iter()
        .filter(|c| dgp_filter.map_or(true, |d| c.dgp == d))
        .filter(|c| n.map_or(true, |nn| c.n == nn))
        .filter(|c| loss_kind.map_or(true, |lk| c.loss_label() == lk))
        .collect();
    if cells.is_empty() {
        return Err(CliError::config(
            "cell filters left nothing to simulate".into(),
        ));
    }
    let defaults = SimProtocol::default();
    let proto = SimProtocol {
        reps: reps.unwrap_or(defaults.reps),
        b: r.bootstrap_or(defaults.b),
        k1: r.k1,
        k2: r.k2,
        folds: r.folds,
        levels: r.levels_or(&defaults.levels),
        seed: r.seed,
        policy: match r.mass_multiplier {
            Some(m) => drband::MassPolicy { multiplier: m },
            None => defaults.policy,
        },
        max_drop_frac: r.max_drop_frac.unwrap_or(defaults.max_drop_frac),
        ..defaults
    };
    let report_out = match kind {
        "coverage" => simulation::run_coverage_with(&cells, &proto, band_method)?,
        "rejection" => simulation::run_rejection_with(&cells, &proto, band_method)?,
        _ => simulation::bias_variance_with(&cells, &proto, band_method)?,
    };
    report::write_experiment_csv(
        File::create(out_path(r, "experiment.csv"))?,
        &report_out,
    )?;
    report::write_json(File::create(out_path(r, "experiment.json"))?, &report_out)?;
    write_meta(
        r,
        "simulate",
        json!({
            "preset": preset,
            "experiment": kind,
            "band_method": band_method.label(),
            "cells": cells.len(),
            "protocol": {
                "reps": proto.reps,
                "b": proto.b,
                "k1": proto.k1,
                "k2": proto.k2,
                "folds": proto.folds,
                "levels": proto.levels,
                "seed": proto.seed,
                "mass_multiplier": proto.policy.multiplier,
                "max_drop_frac": proto.max_drop_frac,
                "oracle_draws": proto.oracle_draws,
                "j": proto.j,
                "j_override": proto.j_override,
            },
        }),
    )
}

pub fn cmd_diagnose(r: &Resolved) -> Result<(), CliError> {
    let ds = r.load_dataset()?;
    let mode = r.weights_mode();
    let w = center_weights(&ds, mode)?;
    report::write_weights_csv(
        File::create(out_path(r, "weights.csv"))?,
        ds.t(),
        &w.values,
    )?;
    let basis_block = match mode {
        WeightsMode::Sieve(cfg) => {
            let basis = Basis::new(&ds, &cfg)?;
            let diag = diagnose_basis(&basis.matrix(&ds), drband::sieve::CONDITION_THRESHOLD);
            serde_json::to_value(&diag).map_err(Error::from)?
        }
        WeightsMode::Naive => Value::Null,
    };
    let diagnostics = json!({
        "weights": w.summary(),
        "basis": basis_block,
        "n": ds.n(),
    });
    report::write_json(
        File::create(out_path(r, "diagnostics.json"))?,
        &diagnostics,
    )?;
    write_meta(r, "diagnose", json!({ "n": ds.n() }))
}
