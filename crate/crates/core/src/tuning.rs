//! Data-driven tuning: adjusted F-fold cross-validation for the sieve
//! degrees and pilot bandwidth, a turning-point undersmoothing rule
//! (Method 1), and a Lepski-type adaptive bandwidth with a bias-corrected
//! band (Method 2).
//!
//! The CV criterion reweights held-out losses by the full-sample balancing
//! weights and divides by (1 − K/N)² so richer sieves are not rewarded for
//! overfitting the moment constraints. Method 1 walks a descending
//! bandwidth ladder h_j = (J−j)/J·h₀ from a slightly oversmoothing pilot
//! and picks the rung where the sup-distance profile between consecutive
//! fits turns sharply upward. Method 2 compares estimates across a dyadic
//! candidate set; a bandwidth survives when its deviation from every
//! smaller candidate, normalized by a truncated pair scale, stays below a
//! bootstrap threshold, and the final band inflates the critical value to
//! pay for adaptation.

use crate::bands::{self, BandAxis, BandEstimate, BandTarget, ScaleMethod, WeightsMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::KernelConfig;
use crate::local::{MassPolicy, PreparedPoint};
use crate::loss::Loss;
use crate::parallel;
use crate::rng::{self, salt};
use crate::sieve::SieveConfig;
use crate::stats;
use crate::weights;
use rand::seq::SliceRandom;
use serde::Serialize;

/// F = 5 folds.
pub const DEFAULT_FOLDS: usize = 5;
/// J = 20 ladder rungs for Method 1.
pub const DEFAULT_J: usize = 20;
/// Lepski acceptance inflation v.
pub const LEPSKI_V: f64 = 1.1;
/// Lepski band inflation u_N.
pub const LEPSKI_U: f64 = 0.5;
/// Lepski pair-scale truncation constant c_σ.
pub const LEPSKI_C_SIGMA: f64 = 0.25;
/// Tolerated fraction of replicate drops across all Lepski candidates.
const LEPSKI_MAX_UNION_DROP: f64 = 0.05;
/// Tolerated per-candidate drop fraction before the candidate is removed.
const LEPSKI_MAX_CANDIDATE_DROP: f64 = 0.02;

/// Cross-validation search space.
#[derive(Debug, Clone)]
pub struct CvGrid {
    pub degrees: Vec<(usize, usize)>,
    pub bandwidths: Vec<f64>,
    pub folds: usize,
}

impl CvGrid {
    pub fn new(degrees: Vec<(usize, usize)>, bandwidths: Vec<f64>, folds: usize) -> Result<CvGrid> {
        if degrees.is_empty() || bandwidths.is_empty() {
            return Err(Error::InvalidInput("empty CV grid".into()));
        }
        if folds < 2 {
            return Err(Error::InvalidInput(format!(
                "CV needs at least 2 folds, got {folds}"
            )));
        }
        if bandwidths.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::InvalidInput(
                "CV bandwidths must be positive".into(),
            ));
        }
        Ok(CvGrid {
            degrees,
            bandwidths,
            folds,
        })
    }

    /// All degree pairs in {1..p}² crossed with the given bandwidths.
    pub fn full(p: usize, bandwidths: Vec<f64>, folds: usize) -> Result<CvGrid> {
        let mut degrees = Vec::new();
        for k1 in 1..=p {
            for k2 in 1..=p {
                degrees.push((k1, k2));
            }
        }
        CvGrid::new(degrees, bandwidths, folds)
    }

    /// Fixed degrees, CV over bandwidth only (the default protocol).
    pub fn over_bandwidths(
        k1: usize,
        k2: usize,
        bandwidths: Vec<f64>,
        folds: usize,
    ) -> Result<CvGrid> {
        CvGrid::new(vec![(k1, k2)], bandwidths, folds)
    }
}

/// Geometric bandwidth grid around the normal-reference rule
/// 1.06·sd(T)·N^{−1/5}, spanning [0.5, 3] times the rule.
pub fn default_h_grid(ds: &Dataset, count: usize) -> Vec<f64> {
    let sd = stats::sample_sd(ds.t());
    let rot = 1.06 * sd * (ds.n() as f64).powf(-0.2);
    let lo = 0.5 * rot;
    let hi = 3.0 * rot;
    let count = count.max(2);
    (0..count)
        .map(|i| lo * (hi / lo).powf(i as f64 / (count - 1) as f64))
        .collect()
}

/// CV adjustment factor 1/(1 − K/N)².
pub fn cv_adjustment(k: usize, n: usize) -> f64 {
    let ratio = k as f64 / n as f64;
    1.0 / ((1.0 - ratio) * (1.0 - ratio))
}

/// Seeded shuffle then contiguous split; fold sizes differ by at most one.
pub(crate) fn partition_folds(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rng::master(rng::mix(seed, salt::FOLDS));
    idx.shuffle(&mut rng);
    let base = n / folds;
    let rem = n % folds;
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for j in 0..folds {
        let size = base + usize::from(j < rem);
        out.push(idx[start..start + size].to_vec());
        start += size;
    }
    out
}

/// Adjusted F-fold CV score for one (k1, k2, h) candidate.
pub fn cv_score(
    ds: &Dataset,
    k1: usize,
    k2: usize,
    h: f64,
    folds: usize,
    loss: Loss,
    seed: u64,
) -> Result<f64> {
    let mode = WeightsMode::Sieve(SieveConfig::new(k1, k2));
    cv_score_with(ds, mode, k1, k2, h, folds, loss, seed, MassPolicy::default())
}

#[allow(clippy::too_many_arguments)]
pub fn cv_score_with(
    ds: &Dataset,
    mode: WeightsMode,
    k1: usize,
    k2: usize,
    h: f64,
    folds: usize,
    loss: Loss,
    seed: u64,
    policy: MassPolicy,
) -> Result<f64> {
    let partition = partition_folds(ds.n(), folds, seed);
    let full_w = bands::center_weights(ds, mode)?;
    cv_score_partitioned(ds, mode, &full_w, k1, k2, h, &partition, loss, policy)
}

/// Core CV loop over an explicit partition; `full_w` supplies the held-out
/// evaluation weights π̂_K(T_k, X_k) fit on the full sample.
#[allow(clippy::too_many_arguments)]
pub(crate) fn cv_score_partitioned(
    ds: &Dataset,
    mode: WeightsMode,
    full_w: &weights::WeightSet,
    k1: usize,
    k2: usize,
    h: f64,
    partition: &[Vec<usize>],
    loss: Loss,
    policy: MassPolicy,
) -> Result<f64> {
    let n = ds.n();
    let k_dim = SieveConfig::new(k1, k2).dim(ds.dx());
    if k_dim >= n {
        return Err(Error::BasisDimension { k: k_dim, n });
    }
    let kernel = KernelConfig::new(h)?;
    let fold_scores = parallel::par_map_indexed(partition.len(), |j| -> Result<f64> {
        let held = &partition[j];
        if held.is_empty() {
            return Err(Error::InvalidInput("empty CV fold".into()));
        }
        let train_idx: Vec<usize> = (0..n).filter(|i| !held.contains(i)).collect();
        let train = ds.subset(&train_idx);
        let train_w = bands::center_weights(&train, mode)?;
        let mut sum = 0.0;
        for &k in held {
            let t_k = ds.t()[k];
            // No range check: a held-out extreme is inside the full range.
            let fit = PreparedPoint::new(&train, t_k, &kernel).fit(
                &train_w.values,
                None,
                loss,
                policy,
            )?;
            let pi_k = full_w.weight_at(t_k, ds.x_row(k));
            sum += pi_k * loss.eval(ds.y()[k] - fit.theta1);
        }
        Ok(sum / held.len() as f64)
    });
    let mut total = 0.0;
    for s in fold_scores {
        total += s?;
    }
    Ok(total * cv_adjustment(k_dim, n))
}

/// One CV cell in the selection report.
#[derive(Debug, Clone, Serialize)]
pub struct CvCell {
    pub k1: usize,
    pub k2: usize,
    pub h: f64,
    pub score: Option<f64>,
    pub error: Option<String>,
}

/// CV winner plus the full score table.
#[derive(Debug, Clone, Serialize)]
pub struct PilotSelection {
    pub k1: usize,
    pub k2: usize,
    pub h_tilde: f64,
    pub score: f64,
    pub cells: Vec<CvCell>,
}

/// Minimize the adjusted CV score over the grid; ties break toward smaller
/// K, then smaller h.
pub fn select_pilot(ds: &Dataset, grid: &CvGrid, loss: Loss, seed: u64) -> Result<PilotSelection> {
    select_pilot_with(ds, None, grid, loss, seed, MassPolicy::default())
}

/// As `select_pilot`, with an explicit weights mode. `mode` = None uses
/// sieve weights at each candidate's own degrees; naive mode keeps π ≡ 1
/// everywhere while the dimension adjustment still tracks the candidate.
pub fn select_pilot_with(
    ds: &Dataset,
    mode: Option<WeightsMode>,
    grid: &CvGrid,
    loss: Loss,
    seed: u64,
    policy: MassPolicy,
) -> Result<PilotSelection> {
    let partition = partition_folds(ds.n(), grid.folds, seed);
    let mut cells = Vec::new();
    let mut best: Option<(f64, usize, usize, usize, f64)> = None; // score, K, k1, k2, h
    for &(k1, k2) in &grid.degrees {
        let cand_mode = mode.unwrap_or(WeightsMode::Sieve(SieveConfig::new(k1, k2)));
        // The evaluation weights depend on the degrees but not on h.
        let full_w = match bands::center_weights(ds, cand_mode) {
            Ok(w) => w,
            Err(e) => {
                for &h in &grid.bandwidths {
                    cells.push(CvCell {
                        k1,
                        k2,
                        h,
                        score: None,
                        error: Some(e.to_string()),
                    });
                }
                continue;
            }
        };
        for &h in &grid.bandwidths {
            let res = cv_score_partitioned(
                ds, cand_mode, &full_w, k1, k2, h, &partition, loss, policy,
            );
            match res {
                Ok(score) => {
                    cells.push(CvCell {
                        k1,
                        k2,
                        h,
                        score: Some(score),
                        error: None,
                    });
                    let k_dim = SieveConfig::new(k1, k2).dim(ds.dx());
                    let better = match &best {
                        None => true,
                        Some((s, k, _, _, bh)) => {
                            score < *s
                                || (score == *s && (k_dim < *k || (k_dim == *k && h < *bh)))
                        }
                    };
                    if better {
                        best = Some((score, k_dim, k1, k2, h));
                    }
                }
                Err(e) => cells.push(CvCell {
                    k1,
                    k2,
                    h,
                    score: None,
                    error: Some(e.to_string()),
                }),
            }
        }
    }
    match best {
        Some((score, _, k1, k2, h)) => Ok(PilotSelection {
            k1,
            k2,
            h_tilde: h,
            score,
            cells,
        }),
        None => Err(Error::NoCandidate(
            "every CV candidate failed to fit".into(),
        )),
    }
}

/// Pilot bandwidth h₀ for the undersmoothing ladder: 1.1·h̃ for levels,
/// 4·h̃·N^{1/5}·N^{−1/7} for derivatives.
pub fn undersmooth_pilot(h_tilde: f64, n: usize, target: BandTarget) -> f64 {
    match target {
        BandTarget::GPrime => 4.0 * h_tilde * (n as f64).powf(1.0 / 5.0 - 1.0 / 7.0),
        _ => 1.1 * h_tilde,
    }
}

/// Lepski seed bandwidth h̃₀: h̃ for levels, 3·h̃·N^{1/5}·N^{−1/7} for
/// derivatives.
pub fn lepski_seed(h_tilde: f64, n: usize, target: BandTarget) -> f64 {
    match target {
        BandTarget::GPrime => 3.0 * h_tilde * (n as f64).powf(1.0 / 5.0 - 1.0 / 7.0),
        _ => h_tilde,
    }
}

/// Method-1 configuration.
#[derive(Debug, Clone, Copy)]
pub struct UndersmoothConfig {
    /// Ladder length J.
    pub j: usize,
    /// Skip detection and use this rung (the reference protocol fixes 18).
    pub j_override: Option<usize>,
    pub policy: MassPolicy,
}

impl Default for UndersmoothConfig {
    fn default() -> Self {
        UndersmoothConfig {
            j: DEFAULT_J,
            j_override: None,
            policy: MassPolicy::default(),
        }
    }
}

/// Method-1 output.
#[derive(Debug, Clone, Serialize)]
pub struct UndersmoothResult {
    pub h_u: f64,
    pub h0: f64,
    pub chosen_j: usize,
    /// d_j = sup_t |ĝ_{h_j} − ĝ_{h_{j−1}}|, entry i holding j = i+1; empty
    /// under an override.
    pub distance_profile: Vec<f64>,
    /// Ladder bandwidths h_j actually fit.
    pub ladder: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Second-difference turning-point detector on the log profile. `profile`
/// holds d_j for j = 1..=L in order; returns the detected rung j*.
pub fn detect_turning_point(profile: &[f64]) -> Result<usize> {
    if profile.is_empty() {
        return Err(Error::NoCandidate("empty distance profile".into()));
    }
    let logs: Vec<f64> = profile.iter().map(|d| d.max(f64::MIN_POSITIVE).ln()).collect();
    if logs.len() < 3 {
        // Too short for a second difference: fall back to the largest
        // first difference, then to the first rung.
        return Ok(logs.len());
    }
    // Entry i corresponds to j = i+1; second differences exist for i >= 2.
    let mut best_i = 2;
    let mut best = f64::NEG_INFINITY;
    for i in 2..logs.len() {
        let dd = logs[i] - 2.0 * logs[i - 1] + logs[i - 2];
        if dd > best {
            best = dd;
            best_i = i;
        }
    }
    Ok(best_i + 1)
}

/// Method 1: undersmoothing bandwidth from the distance-profile turning
/// point, or from an explicit rung override.
pub fn undersmooth_bandwidth(
    ds: &Dataset,
    cfg: &SieveConfig,
    loss: Loss,
    grid: &[f64],
    h_tilde: f64,
    target: BandTarget,
    ucfg: &UndersmoothConfig,
) -> Result<UndersmoothResult> {
    undersmooth_bandwidth_with(ds, WeightsMode::Sieve(*cfg), loss, grid, h_tilde, target, ucfg)
}

pub fn undersmooth_bandwidth_with(
    ds: &Dataset,
    mode: WeightsMode,
    loss: Loss,
    grid: &[f64],
    h_tilde: f64,
    target: BandTarget,
    ucfg: &UndersmoothConfig,
) -> Result<UndersmoothResult> {
    let j_total = ucfg.j;
    if j_total < 3 {
        return Err(Error::InvalidInput(format!(
            "undersmoothing ladder needs J >= 3, got {j_total}"
        )));
    }
    if !(h_tilde > 0.0) {
        return Err(Error::InvalidInput(format!(
            "pilot bandwidth must be positive, got {h_tilde}"
        )));
    }
    let h0 = undersmooth_pilot(h_tilde, ds.n(), target);
    let rung = |j: usize| (j_total - j) as f64 / j_total as f64 * h0;

    if let Some(j) = ucfg.j_override {
        if j == 0 || j >= j_total {
            return Err(Error::InvalidInput(format!(
                "rung override {j} outside 1..{}",
                j_total - 1
            )));
        }
        return Ok(UndersmoothResult {
            h_u: rung(j),
            h0,
            chosen_j: j,
            distance_profile: Vec::new(),
            ladder: Vec::new(),
            warnings: Vec::new(),
        });
    }

    let ws = bands::center_weights(ds, mode)?;
    let mut curves: Vec<Vec<f64>> = Vec::new();
    let mut ladder = Vec::new();
    let mut warnings = Vec::new();
    for j in 0..j_total {
        let h_j = rung(j);
        let kernel = KernelConfig::new(h_j)?;
        let prepared: Vec<PreparedPoint> = grid
            .iter()
            .map(|&t| PreparedPoint::new(ds, t, &kernel))
            .collect();
        match bands::fit_curve_checked(&prepared, &ws.values, None, loss, ucfg.policy) {
            Ok((g, gp)) => {
                curves.push(match target {
                    BandTarget::GPrime => gp,
                    _ => g,
                });
                ladder.push(h_j);
            }
            Err(e) => {
                // Smallest rungs may starve the kernel windows; truncate.
                warnings.push(format!("ladder truncated at rung {j} (h={h_j:.5}): {e}"));
                break;
            }
        }
    }
    if curves.len() < 2 {
        return Err(Error::NoCandidate(format!(
            "undersmoothing ladder too short after truncation ({} rungs)",
            curves.len()
        )));
    }
    let profile: Vec<f64> = (1..curves.len())
        .map(|j| {
            curves[j]
                .iter()
                .zip(&curves[j - 1])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let chosen_j = detect_turning_point(&profile)?;
    Ok(UndersmoothResult {
        h_u: rung(chosen_j),
        h0,
        chosen_j,
        distance_profile: profile,
        ladder,
        warnings,
    })
}

/// Lepski candidate set and constants.
#[derive(Debug, Clone, Serialize)]
pub struct LepskiConfig {
    /// Candidates 2^{−ℓ}, ℓ = j_min..=j_max, stored in descending order.
    pub candidates: Vec<f64>,
    pub j_min: i64,
    pub j_max: i64,
    pub gamma_n: f64,
    pub v: f64,
    pub u_n: f64,
    pub c_sigma: f64,
}

/// Build the dyadic candidate set from the sample size and seed bandwidth.
pub fn lepski_candidates(n: usize, h_tilde: f64, target: BandTarget) -> Result<LepskiConfig> {
    if n < 8 {
        return Err(Error::InvalidInput(format!(
            "Lepski candidate construction needs N >= 8, got {n}"
        )));
    }
    if !(h_tilde > 0.0) {
        return Err(Error::InvalidInput(format!(
            "seed bandwidth must be positive, got {h_tilde}"
        )));
    }
    let h0 = lepski_seed(h_tilde, n, target);
    let nf = n as f64;
    let ln_n = nf.ln();
    let j_tilde = (10.0 * nf * h0 / ln_n.powi(4)).log2();
    let j_max = j_tilde.max(-(h0 / 10.0).log2()).ceil() as i64;
    let j_max_f = j_max as f64;
    let j_min = j_max_f
        .ln()
        .max(-(h0 * ln_n.powf(0.2) / 3.0).log2())
        .ceil() as i64;
    if j_min > j_max {
        return Err(Error::NoCandidate(format!(
            "empty Lepski candidate set (j_min={j_min} > j_max={j_max})"
        )));
    }
    let candidates: Vec<f64> = (j_min..=j_max).map(|l| 2.0_f64.powi(-(l as i32))).collect();
    let gamma_n = 0.5_f64.min((j_max_f.ln() / j_max_f).sqrt());
    Ok(LepskiConfig {
        candidates,
        j_min,
        j_max,
        gamma_n,
        v: LEPSKI_V,
        u_n: LEPSKI_U,
        c_sigma: LEPSKI_C_SIGMA,
    })
}

/// Acceptance rule: walk candidates in descending order and return the
/// first whose statistic is within the threshold; `stats[i]` pairs with
/// `candidates[i]`. Falls back to the smallest candidate.
pub(crate) fn select_from_stats(candidates: &[f64], stats: &[f64], threshold: f64) -> (usize, bool) {
    for (i, s) in stats.iter().enumerate() {
        if *s <= threshold {
            return (i, false);
        }
    }
    (candidates.len() - 1, true)
}

/// Per-pair diagnostic: sup-normalized discrepancy between two candidates
/// and the truncated pair scale it used.
#[derive(Debug, Clone, Serialize)]
pub struct LepskiPairStat {
    pub h: f64,
    pub h2: f64,
    pub stat: f64,
    /// σ̂(t, h, h₂) per grid point, after truncation at c_σ·σ̂(t, h₂).
    pub sigma: Vec<f64>,
}

/// Diagnostics accompanying a Lepski run.
#[derive(Debug, Clone, Serialize)]
pub struct LepskiDiagnostics {
    /// Retained candidates, descending.
    pub candidates: Vec<f64>,
    pub pair_stats: Vec<LepskiPairStat>,
    /// Acceptance statistic per candidate (sup over its pairs).
    pub acceptance: Vec<f64>,
    /// Per-candidate single-bandwidth scale σ̂(t, h) per grid point.
    pub sigma_h: Vec<Vec<f64>>,
    pub c_tilde: f64,
    pub threshold: f64,
    pub fallback: bool,
    pub dropped_candidates: Vec<(f64, String)>,
    pub dropped_replicates: usize,
    pub retained_replicates: usize,
}

/// Full Lepski output: selected bandwidth, bands (one per requested
/// alpha), and diagnostics.
#[derive(Debug, Clone)]
pub struct LepskiRun {
    pub h_hat: f64,
    pub c_tilde: f64,
    /// ĉ_N(α) per requested alpha, in input order.
    pub c_hats: Vec<f64>,
    /// Bias-corrected bands, aligned with `c_hats`.
    pub bands: Vec<BandEstimate>,
    pub diagnostics: LepskiDiagnostics,
}

/// Select the Lepski bandwidth.
#[allow(clippy::too_many_arguments)]
pub fn lepski_select(
    ds: &Dataset,
    cfg: &SieveConfig,
    loss: Loss,
    grid: &[f64],
    lcfg: &LepskiConfig,
    b: usize,
    seed: u64,
    target: BandTarget,
) -> Result<f64> {
    let run = lepski_run(
        ds,
        WeightsMode::Sieve(*cfg),
        loss,
        grid,
        lcfg,
        b,
        seed,
        target,
        MassPolicy::default(),
        &[],
    )?;
    Ok(run.h_hat)
}

/// Lepski band at level alpha.
#[allow(clippy::too_many_arguments)]
pub fn lepski_band(
    ds: &Dataset,
    cfg: &SieveConfig,
    loss: Loss,
    grid: &[f64],
    lcfg: &LepskiConfig,
    alpha: f64,
    b: usize,
    seed: u64,
    target: BandTarget,
) -> Result<LepskiRun> {
    lepski_run(
        ds,
        WeightsMode::Sieve(*cfg),
        loss,
        grid,
        lcfg,
        b,
        seed,
        target,
        MassPolicy::default(),
        &[alpha],
    )
}

struct CandidateFit {
    h: f64,
    center: Vec<f64>,
    /// Per-replicate target-component curves, b-aligned; None = failed.
    reps: Vec<Option<Vec<f64>>>,
}

/// The shared Lepski engine. Bootstrap weights are bandwidth-free, so each
/// replicate's weight solve happens once and is reused by every candidate.
/// A candidate is dropped when its center fit fails or more than 2% of its
/// replicates fail; surviving candidates are then aligned on the common set
/// of replicates so pair deviations subtract like with like.
#[allow(clippy::too_many_arguments)]
pub fn lepski_run(
    ds: &Dataset,
    mode: WeightsMode,
    loss: Loss,
    grid: &[f64],
    lcfg: &LepskiConfig,
    b: usize,
    seed: u64,
    target: BandTarget,
    policy: MassPolicy,
    alphas: &[f64],
) -> Result<LepskiRun> {
    if lcfg.candidates.is_empty() {
        return Err(Error::NoCandidate("empty Lepski candidate set".into()));
    }
    if b < 2 {
        return Err(Error::InvalidInput(format!(
            "Lepski needs at least 2 bootstrap replicates, got {b}"
        )));
    }
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty evaluation grid".into()));
    }
    if target == BandTarget::Tau {
        return Err(Error::InvalidInput(
            "Lepski tuning targets g or gprime, not tau".into(),
        ));
    }
    let draws = weights::draw_multipliers(ds.n(), b, seed);
    let center_w = bands::center_weights(ds, mode)?;
    let rep_w = bands::compute_replicate_weights(ds, mode, &draws);

    let mut fits: Vec<CandidateFit> = Vec::new();
    let mut dropped_candidates = Vec::new();
    for &h in &lcfg.candidates {
        let kernel = KernelConfig::new(h)?;
        let prepared: Vec<PreparedPoint> = grid
            .iter()
            .map(|&t| PreparedPoint::new(ds, t, &kernel))
            .collect();
        let center = match bands::fit_curve_checked(&prepared, &center_w.values, None, loss, policy)
        {
            Ok((g, gp)) => match target {
                BandTarget::GPrime => gp,
                _ => g,
            },
            Err(e) => {
                dropped_candidates.push((h, format!("center fit failed: {e}")));
                continue;
            }
        };
        let reps: Vec<Option<Vec<f64>>> = parallel::par_map_indexed(b, |bi| {
            rep_w.sets[bi].as_ref().and_then(|ws| {
                bands::fit_curve_checked(&prepared, &ws.values, Some(&draws[bi]), loss, policy)
                    .ok()
                    .map(|(g, gp)| match target {
                        BandTarget::GPrime => gp,
                        _ => g,
                    })
            })
        });
        let failed = reps.iter().filter(|r| r.is_none()).count();
        if failed as f64 > LEPSKI_MAX_CANDIDATE_DROP * b as f64 {
            dropped_candidates.push((
                h,
                format!("{failed} of {b} replicates failed at this bandwidth"),
            ));
            continue;
        }
        fits.push(CandidateFit { h, center, reps });
    }
    if fits.is_empty() {
        return Err(Error::NoCandidate(format!(
            "all {} Lepski candidates failed",
            lcfg.candidates.len()
        )));
    }

    // Replicates usable at every surviving candidate.
    let retained_b: Vec<usize> = (0..b)
        .filter(|&bi| fits.iter().all(|f| f.reps[bi].is_some()))
        .collect();
    let dropped_replicates = b - retained_b.len();
    if (dropped_replicates as f64) > LEPSKI_MAX_UNION_DROP * b as f64 {
        return Err(Error::TooManyDrops {
            dropped: dropped_replicates,
            total: b,
            max_frac: LEPSKI_MAX_UNION_DROP,
        });
    }
    if retained_b.len() < 2 {
        return Err(Error::NoCandidate(
            "fewer than 2 replicates survived across Lepski candidates".into(),
        ));
    }

    let m = grid.len();
    let r = retained_b.len();
    // dev[c][rr][t]: replicate deviation from the candidate's center.
    let dev: Vec<Vec<Vec<f64>>> = fits
        .iter()
        .map(|f| {
            retained_b
                .iter()
                .map(|&bi| {
                    f.reps[bi]
                        .as_ref()
                        .unwrap()
                        .iter()
                        .zip(&f.center)
                        .map(|(a, c)| a - c)
                        .collect()
                })
                .collect()
        })
        .collect();

    // Per-candidate scale sigma_h[c][t] (bootstrap SD over replicates).
    let mut sigma_h = Vec::with_capacity(fits.len());
    for devs in &dev {
        let mut sig = Vec::with_capacity(m);
        for t in 0..m {
            let col: Vec<f64> = (0..r).map(|rr| devs[rr][t]).collect();
            let s = stats::sample_sd(&col);
            if !(s > 0.0) {
                return Err(Error::DegenerateScale { index: t });
            }
            sig.push(s);
        }
        sigma_h.push(sig);
    }

    // Pair scales and statistics over 𝒱_N = {(h, h2): h2 < h}, both
    // indices into the surviving candidate list (descending h).
    let mut pair_stats = Vec::new();
    let mut acceptance = vec![0.0_f64; fits.len()];
    let mut sup_tilde = vec![0.0_f64; r];
    for big in 0..fits.len() {
        for small in (big + 1)..fits.len() {
            let mut pair_sd = Vec::with_capacity(m);
            for t in 0..m {
                let col: Vec<f64> = (0..r)
                    .map(|rr| dev[big][rr][t] - dev[small][rr][t])
                    .collect();
                let raw = stats::sample_sd(&col);
                pair_sd.push(raw.max(lcfg.c_sigma * sigma_h[small][t]));
            }
            // Center discrepancy statistic for the acceptance test.
            let stat = (0..m)
                .map(|t| ((fits[big].center[t] - fits[small].center[t]) / pair_sd[t]).abs())
                .fold(0.0, f64::max);
            pair_stats.push(LepskiPairStat {
                h: fits[big].h,
                h2: fits[small].h,
                stat,
                sigma: pair_sd.clone(),
            });
            acceptance[big] = acceptance[big].max(stat);
            // Bootstrap sup statistics feeding c̃.
            for rr in 0..r {
                let sup = (0..m)
                    .map(|t| ((dev[big][rr][t] - dev[small][rr][t]) / pair_sd[t]).abs())
                    .fold(0.0, f64::max);
                sup_tilde[rr] = sup_tilde[rr].max(sup);
            }
        }
    }

    let c_tilde = if fits.len() == 1 {
        // No pairs: the acceptance test is vacuous.
        0.0
    } else {
        stats::order_statistic_quantile(&sup_tilde, 1.0 - lcfg.gamma_n)
    };
    let threshold = lcfg.v * c_tilde;
    let hs: Vec<f64> = fits.iter().map(|f| f.h).collect();
    let (sel, fallback) = select_from_stats(&hs, &acceptance, threshold);
    let h_hat = hs[sel];

    let mut c_hats = Vec::with_capacity(alphas.len());
    let mut bands = Vec::with_capacity(alphas.len());
    if !alphas.is_empty() {
        // ĉ_N(α): sup over t and every candidate of the normalized
        // bootstrap deviation. The sup statistics are alpha-free, so one
        // pass serves every level.
        let mut sup_hat = vec![0.0_f64; r];
        for (c, devs) in dev.iter().enumerate() {
            for rr in 0..r {
                let sup = (0..m)
                    .map(|t| (devs[rr][t] / sigma_h[c][t]).abs())
                    .fold(0.0, f64::max);
                sup_hat[rr] = sup_hat[rr].max(sup);
            }
        }
        for &alpha in alphas {
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(Error::InvalidInput(format!(
                    "alpha must be in (0,1), got {alpha}"
                )));
            }
            let c_hat = stats::order_statistic_quantile(&sup_hat, 1.0 - alpha);
            let c_eff = c_hat + lcfg.u_n * c_tilde;
            let center = &fits[sel].center;
            let sigma = &sigma_h[sel];
            let lower: Vec<f64> = center
                .iter()
                .zip(sigma)
                .map(|(c, s)| c - c_eff * s)
                .collect();
            let upper: Vec<f64> = center
                .iter()
                .zip(sigma)
                .map(|(c, s)| c + c_eff * s)
                .collect();
            c_hats.push(c_hat);
            bands.push(BandEstimate {
                grid: BandAxis::Points(grid.to_vec()),
                center: center.clone(),
                sigma: sigma.clone(),
                c_alpha: c_eff,
                lower,
                upper,
                alpha,
                method: ScaleMethod::BootstrapSd,
            });
        }
    }

    Ok(LepskiRun {
        h_hat,
        c_tilde,
        c_hats,
        bands,
        diagnostics: LepskiDiagnostics {
            candidates: hs,
            pair_stats,
            acceptance,
            sigma_h,
            c_tilde,
            threshold,
            fallback,
            dropped_candidates,
            dropped_replicates,
            retained_replicates: r,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn synthetic(n: usize, seed: u64) -> Dataset {
        let mut rng = rng::master(seed);
        let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let x: Vec<Vec<f64>> = t
            .iter()
            .map(|&ti| vec![0.2 * ti + 0.8 * rng.random::<f64>()])
            .collect();
        let y: Vec<f64> = t
            .iter()
            .zip(&x)
            .map(|(&ti, xi)| (2.0 * ti).sin() + 0.4 * xi[0] + 0.3 * rng.random::<f64>())
            .collect();
        Dataset::new(y, t, x).unwrap()
    }

    #[test]
    fn adjustment_factor_examples() {
        assert_relative_eq!(cv_adjustment(5, 10), 4.0, epsilon = 1e-14);
        assert_relative_eq!(cv_adjustment(0, 10), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn folds_partition_evenly() {
        let folds = partition_folds(103, 5, 7);
        assert_eq!(folds.len(), 5);
        let sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 103);
        assert!(sizes.iter().all(|&s| s == 20 || s == 21));
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        // Seeded determinism.
        assert_eq!(folds, partition_folds(103, 5, 7));
        assert_ne!(folds, partition_folds(103, 5, 8));
    }

    #[test]
    fn cv_score_invariant_to_fold_relabeling() {
        let ds = synthetic(120, 1);
        let mut partition = partition_folds(ds.n(), 4, 3);
        let mode = WeightsMode::Sieve(SieveConfig::new(1, 1));
        let full_w = bands::center_weights(&ds, mode).unwrap();
        let a = cv_score_partitioned(
            &ds, mode, &full_w, 1, 1, 0.45, &partition, Loss::Squared,
            MassPolicy::default(),
        )
        .unwrap();
        partition.rotate_left(2);
        let b = cv_score_partitioned(
            &ds, mode, &full_w, 1, 1, 0.45, &partition, Loss::Squared,
            MassPolicy::default(),
        )
        .unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn perfect_fit_scores_zero() {
        // Exactly linear outcomes: every held-out residual vanishes.
        let n = 60;
        let mut rng = rng::master(2);
        let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let y: Vec<f64> = t.iter().map(|&ti| 2.0 + 3.0 * ti).collect();
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>()]).collect();
        let ds = Dataset::new(y, t, x).unwrap();
        let score = cv_score_with(
            &ds,
            WeightsMode::Naive,
            1,
            1,
            0.5,
            5,
            Loss::Squared,
            11,
            MassPolicy::default(),
        )
        .unwrap();
        assert!(score.abs() < 1e-18, "score {score}");
    }

    #[test]
    fn oversized_basis_is_rejected() {
        let ds = synthetic(12, 3);
        let err = cv_score(&ds, 5, 5, 0.3, 4, Loss::Squared, 1).unwrap_err();
        assert!(matches!(err, Error::BasisDimension { .. }));
    }

    #[test]
    fn select_pilot_matches_exhaustive_rescan() {
        let ds = synthetic(100, 4);
        let grid = CvGrid::over_bandwidths(1, 1, vec![0.15, 0.3, 0.6], 5).unwrap();
        let sel = select_pilot(&ds, &grid, Loss::Squared, 21).unwrap();
        // Brute-force re-evaluation over the same grid and seed.
        let mut best: Option<(f64, f64)> = None;
        for &h in &grid.bandwidths {
            let score = cv_score(&ds, 1, 1, h, 5, Loss::Squared, 21).unwrap();
            if best.map_or(true, |(s, _)| score < s) {
                best = Some((score, h));
            }
        }
        let (best_score, best_h) = best.unwrap();
        assert_eq!(sel.h_tilde, best_h);
        assert_relative_eq!(sel.score, best_score, epsilon = 1e-12);
        assert_eq!(sel.cells.len(), 3);
    }

    #[test]
    fn singleton_grid_is_returned() {
        let ds = synthetic(80, 5);
        let grid = CvGrid::over_bandwidths(1, 1, vec![0.4], 5).unwrap();
        let sel = select_pilot(&ds, &grid, Loss::Squared, 2).unwrap();
        assert_eq!((sel.k1, sel.k2, sel.h_tilde), (1, 1, 0.4));
    }

    #[test]
    fn undersmooth_pilot_transforms() {
        assert_relative_eq!(
            undersmooth_pilot(0.2, 400, BandTarget::G),
            0.22,
            epsilon = 1e-14
        );
        let n = 400_f64;
        assert_relative_eq!(
            undersmooth_pilot(0.2, 400, BandTarget::GPrime),
            0.8 * n.powf(1.0 / 5.0 - 1.0 / 7.0),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            lepski_seed(0.2, 400, BandTarget::GPrime),
            0.6 * n.powf(1.0 / 5.0 - 1.0 / 7.0),
            epsilon = 1e-12
        );
        assert_relative_eq!(lepski_seed(0.2, 400, BandTarget::G), 0.2, epsilon = 1e-14);
    }

    #[test]
    fn turning_point_detector_on_synthetic_profile() {
        // Flat profile, then values tripling each step from j = 15.
        let mut profile = Vec::new();
        for j in 1..=19 {
            let d = if j < 15 {
                0.01
            } else {
                0.01 * 3.0_f64.powi(j - 14)
            };
            profile.push(d);
        }
        assert_eq!(detect_turning_point(&profile).unwrap(), 15);
    }

    #[test]
    fn turning_point_first_max_wins() {
        // Two equal jumps: the earlier one is reported.
        let profile = vec![1.0, 1.0, 3.0, 3.0, 9.0, 9.0];
        let j = detect_turning_point(&profile).unwrap();
        assert_eq!(j, 3);
    }

    #[test]
    fn override_reproduces_protocol_rung() {
        let ds = synthetic(100, 6);
        let ucfg = UndersmoothConfig {
            j: 20,
            j_override: Some(18),
            ..Default::default()
        };
        let grid = ds.default_grid();
        let res = undersmooth_bandwidth(
            &ds,
            &SieveConfig::new(1, 1),
            Loss::Squared,
            &grid,
            0.3,
            BandTarget::G,
            &ucfg,
        )
        .unwrap();
        assert_relative_eq!(res.h0, 0.33, epsilon = 1e-14);
        assert_relative_eq!(res.h_u, 0.1 * 0.33, epsilon = 1e-14);
        assert_eq!(res.chosen_j, 18);
        assert!(res.distance_profile.is_empty());
    }

    #[test]
    fn ladder_invariants_hold() {
        let ds = synthetic(200, 7);
        let grid = ds.default_grid();
        let res = undersmooth_bandwidth(
            &ds,
            &SieveConfig::new(1, 1),
            Loss::Squared,
            &grid,
            0.35,
            BandTarget::G,
            &UndersmoothConfig::default(),
        )
        .unwrap();
        assert!(res.h_u < res.h0);
        let ratio = res.h_u / res.h0;
        let expected = (DEFAULT_J - res.chosen_j) as f64 / DEFAULT_J as f64;
        assert_relative_eq!(ratio, expected, epsilon = 1e-12);
        assert_eq!(res.distance_profile.len() + 1, res.ladder.len());
    }

    #[test]
    fn lepski_candidate_example_set() {
        // ℓ ∈ {2,3,4} → {1/4, 1/8, 1/16}: engineer h̃₀ so the formulas give
        // that range, then check the dyadic construction directly.
        let cfg = LepskiConfig {
            candidates: (2..=4).map(|l| 2.0_f64.powi(-l)).collect(),
            j_min: 2,
            j_max: 4,
            gamma_n: 0.5,
            v: LEPSKI_V,
            u_n: LEPSKI_U,
            c_sigma: LEPSKI_C_SIGMA,
        };
        assert_eq!(cfg.candidates, vec![0.25, 0.125, 0.0625]);
        // Pair set 𝒱: (1/4,1/8), (1/4,1/16), (1/8,1/16).
        let mut pairs = Vec::new();
        for i in 0..cfg.candidates.len() {
            for j in (i + 1)..cfg.candidates.len() {
                pairs.push((cfg.candidates[i], cfg.candidates[j]));
            }
        }
        assert_eq!(
            pairs,
            vec![(0.25, 0.125), (0.25, 0.0625), (0.125, 0.0625)]
        );
    }

    #[test]
    fn lepski_formula_regression() {
        // N = 1200, h̃₀ = 0.2: J_max = 6, J_min = 4, γ saturates at 0.5.
        let cfg = lepski_candidates(1200, 0.2, BandTarget::G).unwrap();
        assert_eq!(cfg.j_max, 6);
        assert_eq!(cfg.j_min, 4);
        assert_relative_eq!(cfg.gamma_n, 0.5, epsilon = 1e-14);
        assert_eq!(cfg.candidates, vec![0.0625, 0.03125, 0.015625]);
        assert_relative_eq!(cfg.v, 1.1, epsilon = 1e-14);
        assert_relative_eq!(cfg.u_n, 0.5, epsilon = 1e-14);
        assert_relative_eq!(cfg.c_sigma, 0.25, epsilon = 1e-14);
    }

    #[test]
    fn gamma_capped_at_half() {
        for n in [100usize, 1000, 20000] {
            for h in [0.05, 0.2, 0.8] {
                if let Ok(cfg) = lepski_candidates(n, h, BandTarget::G) {
                    assert!(cfg.gamma_n <= 0.5 && cfg.gamma_n > 0.0);
                }
            }
        }
    }

    #[test]
    fn selection_rule_single_crossing() {
        // Descending candidates; statistic exceeds the threshold only for
        // the largest bandwidth, so the second-largest wins.
        let candidates = [0.25, 0.125, 0.0625];
        let stats = [3.0, 0.8, 0.0];
        let (idx, fallback) = select_from_stats(&candidates, &stats, 1.0);
        assert_eq!(idx, 1);
        assert!(!fallback);
        // Nothing qualifies: smallest with fallback flag.
        let (idx, fallback) = select_from_stats(&candidates, &[3.0, 2.0, 1.5], 1.0);
        assert_eq!(idx, 2);
        assert!(fallback);
        // Shrinking v (threshold) can only shrink the selection.
        let (idx_loose, _) = select_from_stats(&candidates, &stats, 5.0);
        assert!(idx_loose <= idx);
    }

    fn manual_lepski(candidates: Vec<f64>) -> LepskiConfig {
        LepskiConfig {
            j_min: 0,
            j_max: candidates.len() as i64,
            candidates,
            gamma_n: 0.5,
            v: LEPSKI_V,
            u_n: LEPSKI_U,
            c_sigma: LEPSKI_C_SIGMA,
        }
    }

    #[test]
    fn lepski_run_end_to_end() {
        let ds = synthetic(400, 8);
        let grid = ds.default_grid();
        let lcfg = manual_lepski(vec![0.4, 0.2, 0.1]);
        let run = lepski_run(
            &ds,
            WeightsMode::Sieve(SieveConfig::new(1, 1)),
            Loss::Squared,
            &grid,
            &lcfg,
            60,
            17,
            BandTarget::G,
            MassPolicy::default(),
            &[0.01, 0.05, 0.10],
        )
        .unwrap();
        // Selection lies in the retained candidate set.
        assert!(run.diagnostics.candidates.contains(&run.h_hat));
        assert_eq!(run.bands.len(), 3);
        for (band, c_hat) in run.bands.iter().zip(&run.c_hats) {
            assert_eq!(band.grid.len(), grid.len());
            // Band inflation: c_alpha = ĉ + u_N·c̃ ≥ ĉ.
            assert!(band.c_alpha >= *c_hat);
        }
        // Higher confidence nests lower: the 99% band contains the 95%,
        // which contains the 90%.
        for w in run.bands.windows(2) {
            for t in 0..grid.len() {
                assert!(w[0].lower[t] <= w[1].lower[t] + 1e-12);
                assert!(w[0].upper[t] >= w[1].upper[t] - 1e-12);
            }
        }
        assert!(run.c_tilde >= 0.0);
        let k = run.diagnostics.candidates.len();
        assert_eq!(run.diagnostics.pair_stats.len(), k * (k - 1) / 2);
    }

    #[test]
    fn lepski_truncation_is_active() {
        // σ̂(t, h, h₂) ≥ c_σ·σ̂(t, h₂) for every pair and every grid point.
        let ds = synthetic(350, 12);
        let grid = ds.default_grid();
        let lcfg = manual_lepski(vec![0.45, 0.25, 0.12]);
        let run = lepski_band(
            &ds,
            &SieveConfig::new(1, 1),
            Loss::Squared,
            &grid,
            &lcfg,
            0.10,
            50,
            23,
            BandTarget::G,
        )
        .unwrap();
        let diag = &run.diagnostics;
        assert!(!diag.pair_stats.is_empty());
        for pair in &diag.pair_stats {
            let small = diag
                .candidates
                .iter()
                .position(|&c| c == pair.h2)
                .expect("pair references a retained candidate");
            for (t, s) in pair.sigma.iter().enumerate() {
                let floor = LEPSKI_C_SIGMA * diag.sigma_h[small][t];
                assert!(
                    *s >= floor - 1e-15,
                    "pair ({}, {}) scale {} below floor {} at point {}",
                    pair.h,
                    pair.h2,
                    s,
                    floor,
                    t
                );
            }
        }
    }

    #[test]
    fn lepski_deterministic() {
        let ds = synthetic(300, 9);
        let grid = ds.default_grid();
        let lcfg = manual_lepski(vec![0.4, 0.2]);
        let a = lepski_select(
            &ds, &SieveConfig::new(1, 1), Loss::Squared, &grid, &lcfg, 40, 5, BandTarget::G,
        )
        .unwrap();
        let b = lepski_select(
            &ds, &SieveConfig::new(1, 1), Loss::Squared, &grid, &lcfg, 40, 5, BandTarget::G,
        )
        .unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn single_candidate_is_vacuous() {
        let ds = synthetic(300, 10);
        let grid = ds.default_grid();
        let lcfg = manual_lepski(vec![0.08]);
        let run = lepski_run(
            &ds,
            WeightsMode::Sieve(SieveConfig::new(1, 1)),
            Loss::Squared,
            &grid,
            &lcfg,
            30,
            3,
            BandTarget::G,
            MassPolicy::default(),
            &[],
        )
        .unwrap();
        assert_eq!(run.h_hat, 0.08);
        assert_eq!(run.c_tilde, 0.0);
        assert!(!run.diagnostics.fallback);
    }
}
