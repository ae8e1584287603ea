//! Multiplier-bootstrap ensembles, scale estimates, critical values, and
//! uniform confidence bands.
//!
//! The six-step band construction: (1) fit the center curve with estimated
//! weights and no multipliers; (2) for b = 1..B draw multipliers ξ^{(b)},
//! refit the balancing weights under ξ^{(b)}, and fit the curve with
//! ξ_i^{(b)} π̂^{(b)}_i weighting the loss; (3) estimate a pointwise scale
//! from the replicate deviations (bootstrap SD by default, normalized IQR as
//! the robust alternative); (4) form the sup statistic M_b over the grid;
//! (5) take the ⌈(1−α)B⌉-th order statistic of {M_b} as the critical value;
//! (6) report center ± Ĉ_α σ̂. Replicates whose fit fails anywhere are
//! dropped; more than a small fraction of drops aborts the band.
//!
//! Kernel windows are materialized once per grid point and shared across the
//! center and every replicate, which keeps the replicate loop allocation-light.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::KernelConfig;
use crate::local::{CurveEstimate, MassPolicy, PreparedPoint};
use crate::loss::Loss;
use crate::parallel;
use crate::sieve::SieveConfig;
use crate::stats;
use crate::weights::{self, WeightSet, WeightSource};
use serde::Serialize;

/// Bootstrap replications used by the reference experiments.
pub const DEFAULT_B: usize = 500;
/// Largest tolerated fraction of dropped replicates.
pub const MAX_DROP_FRAC: f64 = 0.02;

/// Which curve component a band targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BandTarget {
    G,
    GPrime,
    Tau,
}

/// Pointwise scale estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMethod {
    BootstrapSd,
    NormalizedIqr,
}

/// How the balancing weights are produced for center and replicates.
#[derive(Debug, Clone, Copy)]
pub enum WeightsMode {
    /// Minimum-variance sieve weights under the given configuration.
    Sieve(SieveConfig),
    /// π ≡ 1 throughout (comparison estimator).
    Naive,
}

/// Center curve plus retained bootstrap replicates.
#[derive(Debug, Clone)]
pub struct BootstrapEnsemble {
    /// Requested number of replicates.
    pub b: usize,
    pub center: CurveEstimate,
    /// Retained replicates, in replicate order.
    pub replicates: Vec<CurveEstimate>,
    pub seed: u64,
    /// Dropped replicates as (replicate index, reason).
    pub dropped: Vec<(usize, String)>,
}

/// Pointwise scale over the evaluation grid.
#[derive(Debug, Clone)]
pub struct ScaleEstimate {
    pub sigma: Vec<f64>,
    pub method: ScaleMethod,
}

/// Band axis: treatment points for g and g', ordered pairs for τ.
#[derive(Debug, Clone)]
pub enum BandAxis {
    Points(Vec<f64>),
    Pairs(Vec<(f64, f64)>),
}

impl BandAxis {
    pub fn len(&self) -> usize {
        match self {
            BandAxis::Points(v) => v.len(),
            BandAxis::Pairs(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Uniform confidence band.
#[derive(Debug, Clone)]
pub struct BandEstimate {
    pub grid: BandAxis,
    pub center: Vec<f64>,
    pub sigma: Vec<f64>,
    pub c_alpha: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub alpha: f64,
    pub method: ScaleMethod,
}

impl BandEstimate {
    /// Average band width 2 Ĉ_α σ̂ over the axis.
    pub fn mean_width(&self) -> f64 {
        let widths: Vec<f64> = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .collect();
        stats::mean(&widths)
    }

    /// True uniformly iff the reference curve lies inside the band at every
    /// axis point.
    pub fn covers(&self, reference: &[f64]) -> Result<bool> {
        if reference.len() != self.grid.len() {
            return Err(Error::InvalidInput(format!(
                "reference curve length {} does not match band axis length {}",
                reference.len(),
                self.grid.len()
            )));
        }
        Ok(reference
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *v >= *l && *v <= *u))
    }
}

/// Uniform null-hypothesis test outcome.
#[derive(Debug, Clone)]
pub struct NullTest {
    pub reject: bool,
    /// Axis indices where the null curve exits the band.
    pub violations: Vec<usize>,
}

pub(crate) fn fit_curve_prepared(
    prepared: &[PreparedPoint],
    pi: &[f64],
    xi: Option<&[f64]>,
    loss: Loss,
    policy: MassPolicy,
) -> Result<(Vec<f64>, Vec<f64>, Vec<bool>)> {
    let mut g = Vec::with_capacity(prepared.len());
    let mut gprime = Vec::with_capacity(prepared.len());
    let mut converged = Vec::with_capacity(prepared.len());
    for p in prepared {
        let fit = p.fit(pi, xi, loss, policy)?;
        g.push(fit.theta1);
        gprime.push(fit.theta2);
        converged.push(fit.converged);
    }
    Ok((g, gprime, converged))
}

/// Like `fit_curve_prepared` but an uncertified optimum anywhere is an error.
pub(crate) fn fit_curve_checked(
    prepared: &[PreparedPoint],
    pi: &[f64],
    xi: Option<&[f64]>,
    loss: Loss,
    policy: MassPolicy,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (g, gprime, converged) = fit_curve_prepared(prepared, pi, xi, loss, policy)?;
    match converged.iter().position(|c| !c) {
        Some(i) => Err(Error::Unconverged { t: prepared[i].t }),
        None => Ok((g, gprime)),
    }
}

pub(crate) struct EnsembleInputs<'a> {
    pub ds: &'a Dataset,
    pub loss: Loss,
    pub grid: &'a [f64],
    pub k: &'a KernelConfig,
    pub policy: MassPolicy,
    pub max_drop_frac: f64,
}

/// Per-replicate bootstrap weights; entries are None when the weight solve
/// failed, with the reason logged in `drops`.
pub(crate) struct ReplicateWeights {
    pub sets: Vec<Option<WeightSet>>,
    pub drops: Vec<(usize, String)>,
}

/// Compute bootstrap weights for every draw, in replicate order. Weight
/// solves that fail drop the replicate rather than aborting the ensemble.
pub(crate) fn compute_replicate_weights(
    ds: &Dataset,
    mode: WeightsMode,
    draws: &[Vec<f64>],
) -> ReplicateWeights {
    let sets: Vec<Result<WeightSet>> = match mode {
        WeightsMode::Sieve(cfg) => parallel::par_map_indexed(draws.len(), |b| {
            weights::bootstrap_weights(ds, &cfg, &draws[b])
        }),
        WeightsMode::Naive => draws.iter().map(|_| Ok(WeightSet::naive(ds.n()))).collect(),
    };
    let mut out = Vec::with_capacity(sets.len());
    let mut drops = Vec::new();
    for (b, set) in sets.into_iter().enumerate() {
        match set {
            Ok(ws) => out.push(Some(ws)),
            Err(e) => {
                drops.push((b, e.to_string()));
                out.push(None);
            }
        }
    }
    ReplicateWeights { sets: out, drops }
}

/// Assemble an ensemble from precomputed weights and multipliers. The
/// center uses `center_w` with no multipliers; replicate b uses weights
/// `reps.sets[b]` and multipliers `draws[b]`. Replicates that fail to fit
/// (hard error or uncertified optimum at any grid point) are dropped.
pub(crate) fn assemble_ensemble(
    inputs: &EnsembleInputs,
    center_w: &WeightSet,
    reps: &ReplicateWeights,
    draws: &[Vec<f64>],
    seed: u64,
) -> Result<BootstrapEnsemble> {
    assert_eq!(reps.sets.len(), draws.len());
    let b_total = draws.len();
    if b_total < 2 {
        return Err(Error::InvalidInput(format!(
            "at least 2 bootstrap replicates required, got {b_total}"
        )));
    }
    if inputs.grid.is_empty() {
        return Err(Error::InvalidInput("empty evaluation grid".into()));
    }
    let prepared: Vec<PreparedPoint> = inputs
        .grid
        .iter()
        .map(|&t| PreparedPoint::new(inputs.ds, t, inputs.k))
        .collect();

    let (g, gprime) =
        fit_curve_checked(&prepared, &center_w.values, None, inputs.loss, inputs.policy)?;
    let center = CurveEstimate {
        grid: inputs.grid.to_vec(),
        g,
        gprime,
        h: inputs.k.h,
        loss: inputs.loss,
        weights_source: center_w.source,
        converged: vec![true; inputs.grid.len()],
    };

    let fits = parallel::par_map_indexed(b_total, |b| match &reps.sets[b] {
        Some(ws) => Some(fit_curve_checked(
            &prepared,
            &ws.values,
            Some(&draws[b]),
            inputs.loss,
            inputs.policy,
        )),
        None => None,
    });

    let mut replicates = Vec::with_capacity(b_total);
    let mut dropped = reps.drops.clone();
    for (b, fit) in fits.into_iter().enumerate() {
        match fit {
            Some(Ok((g, gprime))) => replicates.push(CurveEstimate {
                grid: inputs.grid.to_vec(),
                g,
                gprime,
                h: inputs.k.h,
                loss: inputs.loss,
                weights_source: WeightSource::Bootstrap(b),
                converged: vec![true; inputs.grid.len()],
            }),
            Some(Err(e)) => dropped.push((b, e.to_string())),
            None => {}
        }
    }
    if (dropped.len() as f64) > inputs.max_drop_frac * b_total as f64 {
        return Err(Error::TooManyDrops {
            dropped: dropped.len(),
            total: b_total,
            max_frac: inputs.max_drop_frac,
        });
    }
    Ok(BootstrapEnsemble {
        b: b_total,
        center,
        replicates,
        seed,
        dropped,
    })
}

pub(crate) fn center_weights(ds: &Dataset, mode: WeightsMode) -> Result<WeightSet> {
    match mode {
        WeightsMode::Sieve(cfg) => weights::min_variance_weights(ds, &cfg),
        WeightsMode::Naive => Ok(WeightSet::naive(ds.n())),
    }
}

/// Full ensemble construction: draw multipliers, refit weights per draw,
/// fit all replicate curves. Deterministic in (data, config, seed).
pub fn bootstrap_curves(
    ds: &Dataset,
    cfg: &SieveConfig,
    loss: Loss,
    grid: &[f64],
    k: &KernelConfig,
    b: usize,
    seed: u64,
) -> Result<BootstrapEnsemble> {
    bootstrap_curves_with(
        ds,
        WeightsMode::Sieve(*cfg),
        loss,
        grid,
        k,
        b,
        seed,
        MassPolicy::default(),
        MAX_DROP_FRAC,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn bootstrap_curves_with(
    ds: &Dataset,
    mode: WeightsMode,
    loss: Loss,
    grid: &[f64],
    k: &KernelConfig,
    b: usize,
    seed: u64,
    policy: MassPolicy,
    max_drop_frac: f64,
) -> Result<BootstrapEnsemble> {
    let draws = weights::draw_multipliers(ds.n(), b, seed);
    let center_w = center_weights(ds, mode)?;
    let rep_w = compute_replicate_weights(ds, mode, &draws);
    let inputs = EnsembleInputs {
        ds,
        loss,
        grid,
        k,
        policy,
        max_drop_frac,
    };
    assemble_ensemble(&inputs, &center_w, &rep_w, &draws, seed)
}

/// Test hook: run the ensemble with explicit multiplier draws.
#[doc(hidden)]
pub fn bootstrap_curves_with_multipliers(
    ds: &Dataset,
    cfg: &SieveConfig,
    loss: Loss,
    grid: &[f64],
    k: &KernelConfig,
    draws: &[Vec<f64>],
) -> Result<BootstrapEnsemble> {
    let center_w = center_weights(ds, WeightsMode::Sieve(*cfg))?;
    let rep_w = compute_replicate_weights(ds, WeightsMode::Sieve(*cfg), draws);
    let inputs = EnsembleInputs {
        ds,
        loss,
        grid,
        k,
        policy: MassPolicy::default(),
        max_drop_frac: MAX_DROP_FRAC,
    };
    assemble_ensemble(&inputs, &center_w, &rep_w, draws, 0)
}

pub(crate) fn component<'a>(curve: &'a CurveEstimate, target: BandTarget) -> &'a [f64] {
    match target {
        BandTarget::G => &curve.g,
        BandTarget::GPrime => &curve.gprime,
        BandTarget::Tau => unreachable!("tau bands use the pair path"),
    }
}

/// Replicate-minus-center deviations per grid point, replicate-major.
fn deviations(ens: &BootstrapEnsemble, target: BandTarget) -> Vec<Vec<f64>> {
    let center = component(&ens.center, target);
    ens.replicates
        .iter()
        .map(|rep| {
            component(rep, target)
                .iter()
                .zip(center)
                .map(|(r, c)| r - c)
                .collect()
        })
        .collect()
}

fn sd_over_points(devs: &[Vec<f64>], points: usize, method: ScaleMethod) -> Result<ScaleEstimate> {
    let mut sigma = Vec::with_capacity(points);
    for j in 0..points {
        let col: Vec<f64> = devs.iter().map(|d| d[j]).collect();
        let s = match method {
            ScaleMethod::BootstrapSd => stats::sample_sd(&col),
            ScaleMethod::NormalizedIqr => {
                let q75 = stats::order_statistic_quantile(&col, 0.75);
                let q25 = stats::order_statistic_quantile(&col, 0.25);
                (q75 - q25) / stats::NORMAL_IQR
            }
        };
        if !(s > 0.0) {
            return Err(Error::DegenerateScale { index: j });
        }
        sigma.push(s);
    }
    Ok(ScaleEstimate { sigma, method })
}

/// Pointwise bootstrap standard deviation (divisor B−1) of the deviations.
pub fn scale_bootstrap_sd(ens: &BootstrapEnsemble, target: BandTarget) -> Result<ScaleEstimate> {
    if ens.replicates.len() < 2 {
        return Err(Error::InvalidInput(
            "bootstrap SD needs at least 2 retained replicates".into(),
        ));
    }
    sd_over_points(
        &deviations(ens, target),
        ens.center.grid.len(),
        ScaleMethod::BootstrapSd,
    )
}

/// Pointwise normalized interquartile range of the deviations.
pub fn scale_iqr(ens: &BootstrapEnsemble, target: BandTarget) -> Result<ScaleEstimate> {
    if ens.replicates.len() < 4 {
        return Err(Error::InvalidInput(
            "normalized IQR needs at least 4 retained replicates".into(),
        ));
    }
    sd_over_points(
        &deviations(ens, target),
        ens.center.grid.len(),
        ScaleMethod::NormalizedIqr,
    )
}

/// Sup statistics M_b = max over grid of |deviation|/σ̂, one per replicate.
fn sup_statistics(devs: &[Vec<f64>], sigma: &[f64]) -> Vec<f64> {
    devs.iter()
        .map(|d| {
            d.iter()
                .zip(sigma)
                .map(|(v, s)| (v / s).abs())
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Critical value Ĉ_α for the g component: the ⌈(1−α)B⌉-th order statistic
/// of the sup statistics over retained replicates. Other targets go through
/// `critical_value_for`.
pub fn critical_value(ens: &BootstrapEnsemble, sigma: &ScaleEstimate, alpha: f64) -> Result<f64> {
    critical_value_for(ens, sigma, BandTarget::G, alpha)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!(
            "alpha must be in (0,1), got {alpha}"
        )));
    }
    Ok(())
}

/// Critical value for an explicit target component.
pub fn critical_value_for(
    ens: &BootstrapEnsemble,
    sigma: &ScaleEstimate,
    target: BandTarget,
    alpha: f64,
) -> Result<f64> {
    check_alpha(alpha)?;
    if sigma.sigma.len() != ens.center.grid.len() {
        return Err(Error::InvalidInput(
            "scale vector does not match the ensemble grid".into(),
        ));
    }
    let sups = sup_statistics(&deviations(ens, target), &sigma.sigma);
    Ok(stats::order_statistic_quantile(&sups, 1.0 - alpha))
}

/// Assemble the band center ± c_alpha·sigma.
pub fn build_band(
    grid: BandAxis,
    center: &[f64],
    sigma: &ScaleEstimate,
    c_alpha: f64,
    alpha: f64,
) -> Result<BandEstimate> {
    check_alpha(alpha)?;
    if grid.len() != center.len() || center.len() != sigma.sigma.len() {
        return Err(Error::InvalidInput(
            "band inputs are not aligned on the grid".into(),
        ));
    }
    let lower: Vec<f64> = center
        .iter()
        .zip(&sigma.sigma)
        .map(|(c, s)| c - c_alpha * s)
        .collect();
    let upper: Vec<f64> = center
        .iter()
        .zip(&sigma.sigma)
        .map(|(c, s)| c + c_alpha * s)
        .collect();
    Ok(BandEstimate {
        grid,
        center: center.to_vec(),
        sigma: sigma.sigma.clone(),
        c_alpha,
        lower,
        upper,
        alpha,
        method: sigma.method,
    })
}

/// Uniform band for g or g' from an existing ensemble.
pub fn band_from_ensemble(
    ens: &BootstrapEnsemble,
    target: BandTarget,
    alpha: f64,
    method: ScaleMethod,
) -> Result<BandEstimate> {
    if target == BandTarget::Tau {
        return band_for_tau_with(ens, alpha, method);
    }
    let sigma = match method {
        ScaleMethod::BootstrapSd => scale_bootstrap_sd(ens, target)?,
        ScaleMethod::NormalizedIqr => scale_iqr(ens, target)?,
    };
    let c = critical_value_for(ens, &sigma, target, alpha)?;
    build_band(
        BandAxis::Points(ens.center.grid.clone()),
        component(&ens.center, target),
        &sigma,
        c,
        alpha,
    )
}

/// Uniform band for τ(t₁, t₀) over all ordered pairs, diagonal excluded.
pub fn band_for_tau(ens: &BootstrapEnsemble, alpha: f64) -> Result<BandEstimate> {
    band_for_tau_with(ens, alpha, ScaleMethod::BootstrapSd)
}

pub fn band_for_tau_with(
    ens: &BootstrapEnsemble,
    alpha: f64,
    method: ScaleMethod,
) -> Result<BandEstimate> {
    check_alpha(alpha)?;
    let m = ens.center.grid.len();
    if m < 2 {
        return Err(Error::InvalidInput(
            "tau band needs at least 2 grid points".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(m * m - m);
    let mut center = Vec::with_capacity(m * m - m);
    for i in 0..m {
        for j in 0..m {
            if i != j {
                pairs.push((ens.center.grid[i], ens.center.grid[j]));
                center.push(ens.center.g[i] - ens.center.g[j]);
            }
        }
    }
    // τ̂^{(b)} − τ̂ over pairs equals the difference of g-deviations.
    let gdevs = deviations(ens, BandTarget::G);
    let devs: Vec<Vec<f64>> = gdevs
        .iter()
        .map(|d| {
            let mut row = Vec::with_capacity(pairs.len());
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        row.push(d[i] - d[j]);
                    }
                }
            }
            row
        })
        .collect();
    if devs.len() < 2 {
        return Err(Error::InvalidInput(
            "tau band needs at least 2 retained replicates".into(),
        ));
    }
    let sigma = sd_over_points(&devs, pairs.len(), method)?;
    let sups = sup_statistics(&devs, &sigma.sigma);
    let c = stats::order_statistic_quantile(&sups, 1.0 - alpha);
    build_band(BandAxis::Pairs(pairs), &center, &sigma, c, alpha)
}

/// Reject the uniform null iff the null curve exits the band anywhere.
pub fn test_uniform_null(band: &BandEstimate, null_values: &[f64]) -> Result<NullTest> {
    if null_values.len() != band.grid.len() {
        return Err(Error::InvalidInput(format!(
            "null curve length {} does not match band axis length {}",
            null_values.len(),
            band.grid.len()
        )));
    }
    let violations: Vec<usize> = null_values
        .iter()
        .enumerate()
        .filter(|(i, v)| **v < band.lower[*i] || **v > band.upper[*i])
        .map(|(i, _)| i)
        .collect();
    Ok(NullTest {
        reject: !violations.is_empty(),
        violations,
    })
}

/// Band configuration for the one-call pipeline.
#[derive(Debug, Clone, Copy)]
pub struct BandConfig {
    pub alpha: f64,
    pub b: usize,
    pub seed: u64,
    pub method: ScaleMethod,
    pub policy: MassPolicy,
    pub max_drop_frac: f64,
}

impl BandConfig {
    pub fn new(alpha: f64, b: usize, seed: u64) -> BandConfig {
        BandConfig {
            alpha,
            b,
            seed,
            method: ScaleMethod::BootstrapSd,
            policy: MassPolicy::default(),
            max_drop_frac: MAX_DROP_FRAC,
        }
    }
}

/// Six-step pipeline: ensemble, scale, critical value, band.
pub fn uniform_band(
    ds: &Dataset,
    mode: WeightsMode,
    loss: Loss,
    grid: &[f64],
    k: &KernelConfig,
    target: BandTarget,
    bc: &BandConfig,
) -> Result<BandEstimate> {
    let ens = bootstrap_curves_with(
        ds,
        mode,
        loss,
        grid,
        k,
        bc.b,
        bc.seed,
        bc.policy,
        bc.max_drop_frac,
    )?;
    band_from_ensemble(&ens, target, bc.alpha, bc.method)
}
