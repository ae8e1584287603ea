//! Small numeric helpers: means, sample moments, and the two quantile
//! conventions used throughout the crate.
//!
//! Bootstrap quantiles (critical values, Lepski thresholds, the normalized
//! IQR) use the ceil-order-statistic convention: the p-quantile of B values
//! is the ⌈p·B⌉-th order statistic (1-indexed). Data-grid quantiles (e.g.
//! the [q05, q95] treatment grid) use linearly interpolated order statistics
//! so the grid endpoints vary smoothly with the sample.

/// Normal 75%-25% interquartile distance, z_{0.75} - z_{0.25}.
pub const NORMAL_IQR: f64 = 1.3489795;

/// 1/sqrt(2*pi).
pub const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn mean(xs: &[f64]) -> f64 {
    let n = xs.len();
    assert!(n > 0, "mean of empty slice");
    xs.iter().sum::<f64>() / n as f64
}

/// Sample variance with divisor n-1.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    assert!(n >= 2, "sample variance needs at least two values");
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn sample_sd(xs: &[f64]) -> f64 {
    sample_variance(xs).sqrt()
}

/// p-quantile as the ⌈p·B⌉-th order statistic (1-indexed), clamped to [1, B].
///
/// Sorts a copy; B is small (bootstrap sizes) everywhere this is called.
pub fn order_statistic_quantile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&p), "quantile level must be in [0,1]");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in quantile input"));
    let b = sorted.len();
    let k = ((p * b as f64).ceil() as usize).clamp(1, b);
    sorted[k - 1]
}

/// Linearly interpolated p-quantile of unsorted data (R type-7 convention).
pub fn interpolated_quantile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&p), "quantile level must be in [0,1]");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in quantile input"));
    interpolated_quantile_sorted(&sorted, p)
}

/// Type-7 quantile of already-sorted data.
pub fn interpolated_quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn order_statistic_matches_stated_convention() {
        // M_b = b for b = 1..100, alpha = 0.10: the 0.90-quantile is the
        // ceil(0.9*100) = 90th order statistic.
        let values: Vec<f64> = (1..=100).map(|b| b as f64).collect();
        assert_eq!(order_statistic_quantile(&values, 0.90), 90.0);
    }

    #[test]
    fn order_statistic_constant_sample() {
        let values = vec![3.5; 17];
        assert_eq!(order_statistic_quantile(&values, 0.95), 3.5);
    }

    #[test]
    fn order_statistic_monotone_in_level() {
        let values: Vec<f64> = (0..37).map(|b| (b as f64).sin()).collect();
        let lo = order_statistic_quantile(&values, 0.90);
        let hi = order_statistic_quantile(&values, 0.99);
        assert!(hi >= lo);
    }

    #[test]
    fn symmetric_iqr_convention() {
        // Alternating (-a, a) deviations: 0.25-quantile is -a, 0.75-quantile
        // is a under the ceil convention, so IQR = 2a.
        let a = 0.7;
        let values: Vec<f64> = (0..20).map(|i| if i % 2 == 0 { -a } else { a }).collect();
        let iqr = order_statistic_quantile(&values, 0.75) - order_statistic_quantile(&values, 0.25);
        assert_relative_eq!(iqr, 2.0 * a, epsilon = 1e-12);
        assert_relative_eq!(iqr / NORMAL_IQR, 2.0 * a / 1.3489795, epsilon = 1e-12);
    }

    #[test]
    fn normal_quartiles_normalize_to_unit_scale() {
        // Deviations that are exact replicated normal quartiles: the
        // normalized IQR recovers sigma = 1.
        // Blocks of 25 so the ceil convention lands the 25th order
        // statistic on q25 and the 75th on q75 exactly.
        let q25 = -0.6744897501960817;
        let q75 = 0.6744897501960817;
        let mut values = Vec::new();
        for _ in 0..25 {
            values.extend_from_slice(&[q25, -0.2, q75, 1.5]);
        }
        let iqr = order_statistic_quantile(&values, 0.75) - order_statistic_quantile(&values, 0.25);
        assert_relative_eq!(iqr / NORMAL_IQR, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn interpolated_quantile_midpoint() {
        let values = vec![0.0, 1.0];
        assert_relative_eq!(interpolated_quantile(&values, 0.5), 0.5);
        assert_relative_eq!(interpolated_quantile(&values, 0.25), 0.25);
    }

    #[test]
    fn sample_moments() {
        let values = vec![1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(mean(&values), 2.5);
        assert_relative_eq!(sample_variance(&values), 5.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn two_point_sd() {
        // Deviations (-1, 1): SD with divisor B-1 = 1 is sqrt(2).
        assert_relative_eq!(sample_sd(&[-1.0, 1.0]), 2.0_f64.sqrt(), epsilon = 1e-14);
    }

    proptest! {
        #[test]
        fn order_statistic_is_an_element(values in proptest::collection::vec(-1e3..1e3f64, 1..60),
                                         p in 0.01..0.999f64) {
            let q = order_statistic_quantile(&values, p);
            prop_assert!(values.iter().any(|v| *v == q));
        }

        #[test]
        fn quantile_levels_nest(values in proptest::collection::vec(-1e3..1e3f64, 2..60)) {
            let q90 = order_statistic_quantile(&values, 0.90);
            let q95 = order_statistic_quantile(&values, 0.95);
            let q99 = order_statistic_quantile(&values, 0.99);
            prop_assert!(q99 >= q95 && q95 >= q90);
        }
    }
}
