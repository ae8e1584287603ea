//! Loss functions for the M-regression: squared error and the quantile
//! check loss.
//!
//! The derivative of the check loss at the kink is fixed to q - 1 (any
//! value in [q-1, q] is a valid subgradient; one is pinned for
//! determinism). Optimality certificates bracket the kink instead of using
//! this pinned value.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Loss {
    /// L(v) = v^2: conditional average dose-response.
    Squared,
    /// L(v) = v(q - 1{v <= 0}): conditional q-quantile dose-response.
    Quantile(f64),
}

impl Loss {
    pub fn quantile(q: f64) -> Result<Loss> {
        if !(q.is_finite() && 0.0 < q && q < 1.0) {
            return Err(Error::InvalidInput(format!(
                "quantile level must lie strictly in (0,1), got {q}"
            )));
        }
        Ok(Loss::Quantile(q))
    }

    pub fn eval(&self, v: f64) -> f64 {
        match *self {
            Loss::Squared => v * v,
            Loss::Quantile(q) => v * (q - if v <= 0.0 { 1.0 } else { 0.0 }),
        }
    }

    /// Derivative, with the subgradient convention L'(0) = q - 1.
    pub fn derivative(&self, v: f64) -> f64 {
        match *self {
            Loss::Squared => 2.0 * v,
            Loss::Quantile(q) => q - if v <= 0.0 { 1.0 } else { 0.0 },
        }
    }

    /// Subgradient interval [lo, hi] at v; a point for smooth losses.
    pub fn subgradient(&self, v: f64) -> (f64, f64) {
        match *self {
            Loss::Squared => (2.0 * v, 2.0 * v),
            Loss::Quantile(q) => {
                if v == 0.0 {
                    (q - 1.0, q)
                } else {
                    let d = self.derivative(v);
                    (d, d)
                }
            }
        }
    }

    pub fn is_quantile(&self) -> bool {
        matches!(self, Loss::Quantile(_))
    }
}

impl std::fmt::Display for Loss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Loss::Squared => write!(f, "squared"),
            Loss::Quantile(q) => write!(f, "quantile:{q}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn squared_examples() {
        assert_eq!(Loss::Squared.eval(3.0), 9.0);
        assert_eq!(Loss::Squared.derivative(3.0), 6.0);
    }

    #[test]
    fn quantile_examples() {
        let l = Loss::quantile(0.25).unwrap();
        // v = -2: (-2)(0.25 - 1) = 1.5.
        assert_relative_eq!(l.eval(-2.0), 1.5);
        // L(0) = 0 for any q.
        assert_eq!(l.eval(0.0), 0.0);
        assert_eq!(Loss::quantile(0.9).unwrap().eval(0.0), 0.0);
        // Pinned subgradient value at the kink.
        assert_eq!(l.derivative(0.0), -0.75);
        assert_eq!(l.subgradient(0.0), (-0.75, 0.25));
    }

    #[test]
    fn rejects_bad_quantile_levels() {
        assert!(Loss::quantile(0.0).is_err());
        assert!(Loss::quantile(1.0).is_err());
        assert!(Loss::quantile(f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn check_loss_nonnegative_and_convex_combination(q in 0.01..0.99f64, v in -10.0..10.0f64) {
            let l = Loss::quantile(q).unwrap();
            prop_assert!(l.eval(v) >= 0.0);
            // Derivative is a valid subgradient: L(w) >= L(v) + L'(v)(w - v).
            for w in [-3.0, 0.0, 2.5] {
                prop_assert!(l.eval(w) >= l.eval(v) + l.derivative(v) * (w - v) - 1e-12);
            }
        }
    }
}
