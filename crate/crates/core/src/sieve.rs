//! Product power-series sieve basis u_K(T, X) = w_K1(T) ⊗ w_K2(X).
//!
//! w_p maps a length-r vector to (1, v_1, ..., v_1^p, ..., v_r, ..., v_r^p)
//! of length p*r + 1, so the full basis has dimension
//! K = (K1 + 1) * (K2 * d_X + 1). Covariates are min-max normalized to
//! [0, 1] by default before powers are taken; the fitted ranges live in the
//! basis so evaluation at new (t, x) points is consistent. The power basis
//! is deliberately not orthogonalized; conditioning problems surface
//! through `diagnose_basis` and the ridge fallback in the weights module.

use crate::data::Dataset;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Sieve degrees and normalization policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SieveConfig {
    /// Treatment polynomial degree K1.
    pub k1: usize,
    /// Per-covariate polynomial degree K2.
    pub k2: usize,
    /// Min-max normalize covariates to [0,1] before taking powers.
    pub normalize: bool,
}

impl Default for SieveConfig {
    fn default() -> Self {
        SieveConfig {
            k1: 2,
            k2: 1,
            normalize: true,
        }
    }
}

impl SieveConfig {
    pub fn new(k1: usize, k2: usize) -> Self {
        SieveConfig {
            k1,
            k2,
            ..SieveConfig::default()
        }
    }

    pub fn raw(k1: usize, k2: usize) -> Self {
        SieveConfig {
            k1,
            k2,
            normalize: false,
        }
    }

    /// Basis dimension K = (K1+1)(K2*d_X + 1) for d_X covariates.
    pub fn dim(&self, dx: usize) -> usize {
        (self.k1 + 1) * (self.k2 * dx + 1)
    }
}

/// Length of w_p(v) for r-dimensional v.
pub fn feature_len(r: usize, p: usize) -> usize {
    p * r + 1
}

/// w_p(v) = (1, v_1, ..., v_1^p, ..., v_r, ..., v_r^p).
pub fn power_features(v: &[f64], p: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(feature_len(v.len(), p));
    out.push(1.0);
    for &vi in v {
        let mut pow = 1.0;
        for _ in 0..p {
            pow *= vi;
            out.push(pow);
        }
    }
    out
}

/// Fitted min-max ranges for covariate normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Normalizer {
    fn fit(ds: &Dataset) -> Normalizer {
        let dx = ds.dx();
        let mut lo = vec![f64::INFINITY; dx];
        let mut hi = vec![f64::NEG_INFINITY; dx];
        for i in 0..ds.n() {
            for (j, &v) in ds.x_row(i).iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        Normalizer { lo, hi }
    }

    /// Map x into [0,1] per column; a constant column maps to 0.5 and the
    /// resulting collinearity is surfaced by the Gram diagnostics.
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (j, &v) in x.iter().enumerate() {
            let range = self.hi[j] - self.lo[j];
            out.push(if range > 0.0 {
                (v - self.lo[j]) / range
            } else {
                0.5
            });
        }
    }
}

/// Frozen basis evaluation context: degrees, covariate width, and the
/// normalization ranges fitted on the training dataset.
#[derive(Debug, Clone)]
pub struct Basis {
    pub k1: usize,
    pub k2: usize,
    pub dx: usize,
    norm: Option<Normalizer>,
}

impl Basis {
    /// Fit a basis context to a dataset; fails if K >= n.
    pub fn new(ds: &Dataset, cfg: &SieveConfig) -> Result<Basis> {
        let dx = ds.dx();
        let k = cfg.dim(dx);
        if k >= ds.n() {
            return Err(Error::BasisDimension { k, n: ds.n() });
        }
        Ok(Basis {
            k1: cfg.k1,
            k2: cfg.k2,
            dx,
            norm: cfg.normalize.then(|| Normalizer::fit(ds)),
        })
    }

    /// Basis dimension K = (K1+1)(K2*d_X + 1).
    pub fn dim(&self) -> usize {
        (self.k1 + 1) * (self.k2 * self.dx + 1)
    }

    /// u_K(t, x): Kronecker product with the treatment block varying
    /// slowest, so entry (a, b) equals t^a times x-feature b.
    pub fn eval(&self, t: f64, x: &[f64]) -> DVector<f64> {
        assert_eq!(x.len(), self.dx, "covariate width mismatch");
        let tb = power_features(&[t], self.k1);
        let xb = self.x_block(x);
        kron(&tb, &xb)
    }

    /// The treatment factor w_K1(t).
    pub fn t_block(&self, t: f64) -> Vec<f64> {
        power_features(&[t], self.k1)
    }

    /// The covariate factor w_K2(x) on the normalized scale.
    pub fn x_block(&self, x: &[f64]) -> Vec<f64> {
        match &self.norm {
            Some(norm) => {
                let mut scaled = Vec::with_capacity(self.dx);
                norm.apply(x, &mut scaled);
                power_features(&scaled, self.k2)
            }
            None => power_features(x, self.k2),
        }
    }

    /// K × n matrix with column i = u_K(T_i, X_i).
    pub fn matrix(&self, ds: &Dataset) -> DMatrix<f64> {
        let k = self.dim();
        let n = ds.n();
        let mut m = DMatrix::zeros(k, n);
        for i in 0..n {
            let u = self.eval(ds.t()[i], ds.x_row(i));
            m.set_column(i, &u);
        }
        m
    }
}

fn kron(a: &[f64], b: &[f64]) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() * b.len());
    let mut idx = 0;
    for &ai in a {
        for &bi in b {
            out[idx] = ai * bi;
            idx += 1;
        }
    }
    out
}

/// Eigenvalue report for the sample Gram matrix (1/n) U Uᵀ.
#[derive(Debug, Clone, Serialize)]
pub struct BasisDiagnostics {
    /// Eigenvalues sorted ascending.
    pub eigenvalues: Vec<f64>,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    /// max/min eigenvalue; infinite when min <= 0.
    pub condition: f64,
    pub threshold: f64,
    pub flagged: bool,
}

/// Default condition-number warning threshold.
pub const CONDITION_THRESHOLD: f64 = 1e10;

/// Eigen-diagnose a K × n basis matrix.
pub fn diagnose_basis(basis: &DMatrix<f64>, threshold: f64) -> BasisDiagnostics {
    let n = basis.ncols();
    let gram = basis * basis.transpose() / n as f64;
    let mut eigenvalues: Vec<f64> = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    eigenvalues.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let min = eigenvalues[0];
    let max = eigenvalues[eigenvalues.len() - 1];
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    BasisDiagnostics {
        eigenvalues,
        min_eigenvalue: min,
        max_eigenvalue: max,
        condition,
        threshold,
        flagged: !(condition <= threshold),
    }
}
