//! Minimum-variance stabilized balancing weights.
//!
//! The estimated weights solve min Σ(π_i − 1)²/2 subject to the empirical
//! sieve moment restriction (1/N) Σ π_i u_K(T_i, X_i) = b, where b is the
//! mixed-pair average of u_K over (T_i, X_j), i ≠ j. The closed form is
//! γ̂ = G⁻¹(ū − b) with G the sample Gram matrix and π̂(t, x) = 1 − γ̂ᵀu_K(t, x).
//! Bootstrap weights replace ū and G by their ξ-weighted versions and keep b.
//! Weights may be negative; they are reported, never clipped.
//!
//! `qp_oracle_weights` solves the same program by assembling the full
//! (n+K) × (n+K) KKT system, sharing no code with the closed form; the two
//! routes agreeing is the primal-dual acceptance check.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::sieve::{Basis, SieveConfig};
use crate::stats;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

/// Provenance of a weight set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSource {
    Estimated,
    Bootstrap(usize),
    Naive,
}

/// Fitted weights plus the dual coefficients and evaluation context.
#[derive(Debug, Clone)]
pub struct WeightSet {
    /// π̂ at the sample points.
    pub values: Vec<f64>,
    /// Dual coefficients γ̂ (empty for naive weights).
    pub gamma: DVector<f64>,
    pub source: WeightSource,
    /// Ridge fallback was needed for the Gram solve.
    pub degraded: bool,
    basis: Option<Basis>,
}

/// Summary statistics for diagnostics export.
#[derive(Debug, Clone, Serialize)]
pub struct WeightSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub var: f64,
    pub condition_flag: bool,
}

impl WeightSet {
    /// Naive weights: identically 1, no balancing.
    pub fn naive(n: usize) -> WeightSet {
        WeightSet {
            values: vec![1.0; n],
            gamma: DVector::zeros(0),
            source: WeightSource::Naive,
            degraded: false,
            basis: None,
        }
    }

    /// π̂(t, x) = 1 − γ̂ᵀ u_K(t, x); 1 for naive weights.
    pub fn weight_at(&self, t: f64, x: &[f64]) -> f64 {
        match &self.basis {
            Some(basis) => 1.0 - self.gamma.dot(&basis.eval(t, x)),
            None => 1.0,
        }
    }

    pub fn summary(&self) -> WeightSummary {
        let min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self
            .values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        WeightSummary {
            mean: stats::mean(&self.values),
            min,
            max,
            var: stats::sample_variance(&self.values),
            condition_flag: self.degraded,
        }
    }
}

/// Mixed-pair moment target b = (1/(N(N−1))) Σ_i Σ_{j≠i} u_K(T_i, X_j),
/// computed via the Kronecker factorization
/// b = [Σ_i w(T_i)] ⊗ [Σ_j w(X_j)] − Σ_i w(T_i) ⊗ w(X_i), all over N(N−1).
pub fn target_moments(ds: &Dataset, cfg: &SieveConfig) -> Result<DVector<f64>> {
    let basis = Basis::new(ds, cfg)?;
    Ok(target_from_basis(ds, &basis))
}

pub(crate) fn target_from_basis(ds: &Dataset, basis: &Basis) -> DVector<f64> {
    let n = ds.n();
    let k = basis.dim();
    let t_len = basis.k1 + 1;
    let x_len = basis.k2 * basis.dx + 1;
    let mut sum_t = vec![0.0; t_len];
    let mut sum_x = vec![0.0; x_len];
    let mut sum_diag = DVector::zeros(k);
    for i in 0..n {
        let tb = basis.t_block(ds.t()[i]);
        let xb = basis.x_block(ds.x_row(i));
        for (acc, v) in sum_t.iter_mut().zip(&tb) {
            *acc += v;
        }
        for (acc, v) in sum_x.iter_mut().zip(&xb) {
            *acc += v;
        }
        let mut idx = 0;
        for &a in &tb {
            for &b in &xb {
                sum_diag[idx] += a * b;
                idx += 1;
            }
        }
    }
    let mut b = DVector::zeros(k);
    let mut idx = 0;
    for &a in &sum_t {
        for &c in &sum_x {
            b[idx] = a * c;
            idx += 1;
        }
    }
    let scale = (n * (n - 1)) as f64;
    (b - sum_diag) / scale
}

/// Estimated minimum-variance weights via the closed form.
pub fn min_variance_weights(ds: &Dataset, cfg: &SieveConfig) -> Result<WeightSet> {
    fit_inner(ds, cfg, None, WeightSource::Estimated)
}

/// Bootstrap weights for one multiplier draw ξ: the sample mean and Gram
/// are ξ-weighted, the mixed-pair target b is not.
pub fn bootstrap_weights(ds: &Dataset, cfg: &SieveConfig, xi: &[f64]) -> Result<WeightSet> {
    if xi.len() != ds.n() {
        return Err(Error::InvalidInput(format!(
            "multiplier length {} does not match sample size {}",
            xi.len(),
            ds.n()
        )));
    }
    fit_inner(ds, cfg, Some(xi), WeightSource::Bootstrap(0))
}

fn fit_inner(
    ds: &Dataset,
    cfg: &SieveConfig,
    xi: Option<&[f64]>,
    source: WeightSource,
) -> Result<WeightSet> {
    let basis = Basis::new(ds, cfg)?;
    let u = basis.matrix(ds);
    let n = ds.n();
    let k = basis.dim();

    // ξ-weighted sample mean and Gram; with ξ ≡ 1 the multiplications are
    // exact identities, so the bootstrap path collapses bit-for-bit onto
    // the estimated-weight path.
    let mut ubar = DVector::zeros(k);
    let mut gram = DMatrix::zeros(k, k);
    for i in 0..n {
        let col = u.column(i);
        let w = xi.map_or(1.0, |x| x[i]);
        for r in 0..k {
            let wr = w * col[r];
            ubar[r] += wr;
            for c in r..k {
                gram[(r, c)] += wr * col[c];
            }
        }
    }
    let nf = n as f64;
    ubar /= nf;
    for r in 0..k {
        for c in r..k {
            let v = gram[(r, c)] / nf;
            gram[(r, c)] = v;
            gram[(c, r)] = v;
        }
    }

    let b = target_from_basis(ds, &basis);
    let rhs = &ubar - &b;
    let solved = solve_gram(&gram, &rhs)?;
    let values = (0..n)
        .map(|i| 1.0 - solved.gamma.dot(&u.column(i)))
        .collect();
    Ok(WeightSet {
        values,
        gamma: solved.gamma,
        source,
        degraded: solved.degraded,
        basis: Some(basis),
    })
}

struct GramSolve {
    gamma: DVector<f64>,
    degraded: bool,
}

/// Scaled residual ‖Gx − rhs‖ / (‖G‖_F ‖x‖ + ‖rhs‖).
fn relative_residual(g: &DMatrix<f64>, x: &DVector<f64>, rhs: &DVector<f64>) -> f64 {
    let res = (g * x - rhs).norm();
    let scale = g.norm() * x.norm() + rhs.norm();
    if scale > 0.0 {
        res / scale
    } else {
        res
    }
}

/// Cholesky (falling back to LU) with one iterative-refinement step.
fn try_solve(g: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let refine = |mut x: DVector<f64>, solve: &dyn Fn(&DVector<f64>) -> Option<DVector<f64>>| {
        let r = rhs - g * &x;
        if let Some(dx) = solve(&r) {
            x += dx;
        }
        x.iter().all(|v| v.is_finite()).then_some(x)
    };
    if let Some(chol) = g.clone().cholesky() {
        let x = chol.solve(rhs);
        if let Some(x) = refine(x, &|r| Some(chol.solve(r))) {
            return Some(x);
        }
    }
    let lu = g.clone().lu();
    let x = lu.solve(rhs)?;
    refine(x, &|r| lu.solve(r))
}

/// Solve Gγ = rhs, with the ridge fallback G + εI, ε = 1e−10·trace(G)/K,
/// when the plain solve is unusable.
fn solve_gram(g: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<GramSolve> {
    if let Some(gamma) = try_solve(g, rhs) {
        if relative_residual(g, &gamma, rhs) <= 1e-10 {
            return Ok(GramSolve {
                gamma,
                degraded: false,
            });
        }
    }
    let k = g.nrows();
    let eps = 1e-10 * g.trace() / k as f64;
    let mut ridged = g.clone();
    for i in 0..k {
        ridged[(i, i)] += eps;
    }
    match try_solve(&ridged, rhs) {
        Some(gamma) => {
            let residual = relative_residual(&ridged, &gamma, rhs);
            if residual <= 1e-8 {
                Ok(GramSolve {
                    gamma,
                    degraded: true,
                })
            } else {
                Err(Error::SingularGram { residual })
            }
        }
        None => Err(Error::SingularGram {
            residual: f64::INFINITY,
        }),
    }
}

/// Test oracle: solve the primal QP by assembling the (n+K) × (n+K) KKT
/// system [[I, Uᵀ/N], [U/N, 0]] [π; λ] = [1; b] directly.
pub fn qp_oracle_weights(ds: &Dataset, cfg: &SieveConfig) -> Result<WeightSet> {
    let basis = Basis::new(ds, cfg)?;
    let u = basis.matrix(ds);
    let n = ds.n();
    let k = basis.dim();
    let nf = n as f64;
    let dim = n + k;
    let mut kkt = DMatrix::zeros(dim, dim);
    for i in 0..n {
        kkt[(i, i)] = 1.0;
    }
    for r in 0..k {
        for i in 0..n {
            kkt[(n + r, i)] = u[(r, i)] / nf;
            kkt[(i, n + r)] = u[(r, i)] / nf;
        }
    }
    let b = target_from_basis(ds, &basis);
    let mut rhs = DVector::zeros(dim);
    for i in 0..n {
        rhs[i] = 1.0;
    }
    for r in 0..k {
        rhs[n + r] = b[r];
    }
    let sol = kkt
        .full_piv_lu()
        .solve(&rhs)
        .ok_or(Error::SingularGram {
            residual: f64::INFINITY,
        })?;
    let values: Vec<f64> = (0..n).map(|i| sol[i]).collect();
    // Recover γ from the multipliers: π_i = 1 − γᵀu_i with γ = λ/N.
    let gamma = DVector::from_fn(k, |r, _| sol[n + r] / nf);
    Ok(WeightSet {
        values,
        gamma,
        source: WeightSource::Estimated,
        degraded: false,
        basis: Some(basis),
    })
}

/// B multiplier draws, each n i.i.d. 2·Bernoulli(1/2) values in {0, 2}
/// (mean one, variance one). Draw b reads stream b of the seed, so the set
/// is deterministic and order-independent.
pub fn draw_multipliers(n: usize, b_count: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..b_count)
        .map(|b| {
            let mut rng = rng::substream(seed, b as u64);
            (0..n)
                .map(|_| if rng.random::<bool>() { 2.0 } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Constraint residual ‖(1/N) Σ w_i π_i u_K(T_i, X_i) − b‖∞ where w_i are
/// optional ξ multipliers; used by tests and diagnostics.
pub fn constraint_residual(ds: &Dataset, cfg: &SieveConfig, ws: &WeightSet, xi: Option<&[f64]>) -> Result<f64> {
    let basis = Basis::new(ds, cfg)?;
    let u = basis.matrix(ds);
    let b = target_from_basis(ds, &basis);
    let n = ds.n();
    let mut lhs = DVector::zeros(basis.dim());
    for i in 0..n {
        let w = xi.map_or(1.0, |x| x[i]) * ws.values[i];
        lhs += u.column(i) * w;
    }
    lhs /= n as f64;
    Ok((lhs - b).amax())
}
