use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Quantile of the Beta(a, b) distribution by bisection on the regularized
/// incomplete beta function. Absolute accuracy in `x` is below 1e-12.
pub fn beta_quantile(p: f64, a: f64, b: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "beta shape parameters must be positive");
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    // 2^-50 < 1e-15
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if beta_reg(a, b, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exact (Clopper-Pearson) interval for a binomial proportion.
pub fn clopper_pearson_ci(successes: u64, trials: u64, level: f64) -> Result<(f64, f64)> {
    if trials == 0 || successes > trials {
        return Err(Error::Domain(format!(
            "invalid binomial counts: {successes} successes in {trials} trials"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("confidence level {level} must lie in (0, 1)")));
    }
    let alpha = 1.0 - level;
    let (k, n) = (successes as f64, trials as f64);
    let low = if successes == 0 { 0.0 } else { beta_quantile(alpha / 2.0, k, n - k + 1.0) };
    let high = if successes == trials { 1.0 } else { beta_quantile(1.0 - alpha / 2.0, k + 1.0, n - k) };
    Ok((low, high))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Beta CDF by composite Simpson integration of the density, independent
    /// of the continued-fraction route.
    fn beta_cdf_by_quadrature(x: f64, a: f64, b: f64) -> f64 {
        let ln_norm = statrs::function::gamma::ln_gamma(a + b)
            - statrs::function::gamma::ln_gamma(a)
            - statrs::function::gamma::ln_gamma(b);
        let density = |t: f64| {
            if t <= 0.0 || t >= 1.0 {
                0.0
            } else {
                (ln_norm + (a - 1.0) * t.ln() + (b - 1.0) * (1.0 - t).ln()).exp()
            }
        };
        let n = 20_000;
        let h = x / n as f64;
        let mut sum = density(0.0) + density(x);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            sum += w * density(i as f64 * h);
        }
        sum * h / 3.0
    }

    fn quantile_by_quadrature(p: f64, a: f64, b: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..40 {
            let mid: f64 = 0.5 * (lo + hi);
            if beta_cdf_by_quadrature(mid, a, b) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn five_of_ten_matches_quadrature_oracle() {
        let (lo, hi) = clopper_pearson_ci(5, 10, 0.95).unwrap();
        let lo_oracle = quantile_by_quadrature(0.025, 5.0, 6.0);
        let hi_oracle = quantile_by_quadrature(0.975, 6.0, 5.0);
        assert!((lo - lo_oracle).abs() < 1e-7, "{lo} vs {lo_oracle}");
        assert!((hi - hi_oracle).abs() < 1e-7, "{hi} vs {hi_oracle}");
        assert_eq!(format!("{lo:.3}"), "0.187");
        assert_eq!(format!("{hi:.3}"), "0.813");
    }

    #[test]
    fn grader_sensitivity_interval() {
        let (lo, hi) = clopper_pearson_ci(2281, 3083, 0.95).unwrap();
        assert_eq!(format!("{lo:.3}-{hi:.3}"), "0.724-0.755");
    }

    #[test]
    fn boundary_counts() {
        let (lo, hi) = clopper_pearson_ci(0, 50, 0.95).unwrap();
        assert_eq!(lo, 0.0);
        // Closed form for k = 0: 1 - (alpha/2)^(1/n)
        assert!((hi - (1.0 - 0.025f64.powf(1.0 / 50.0))).abs() < 1e-10);
        let (lo, hi) = clopper_pearson_ci(50, 50, 0.95).unwrap();
        assert_eq!(hi, 1.0);
        assert!((lo - 0.025f64.powf(1.0 / 50.0)).abs() < 1e-10);
    }

    #[test]
    fn invalid_counts() {
        assert!(matches!(clopper_pearson_ci(3, 2, 0.95), Err(Error::Domain(_))));
        assert!(matches!(clopper_pearson_ci(0, 0, 0.95), Err(Error::Domain(_))));
        assert!(matches!(clopper_pearson_ci(1, 2, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn quantile_inverts_cdf_to_1e9() {
        for &(p, a, b) in &[(0.025, 2281.0, 803.0), (0.975, 3.5, 1.2), (0.5, 0.7, 0.7), (0.001, 10.0, 2.0)] {
            let x = beta_quantile(p, a, b);
            assert!((beta_reg(a, b, x) - p).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn interval_contains_the_proportion(n in 1u64..500, frac in 0.0f64..=1.0) {
            let k = ((n as f64) * frac).floor() as u64;
            let (lo, hi) = clopper_pearson_ci(k, n, 0.95).unwrap();
            let p = k as f64 / n as f64;
            prop_assert!(lo <= p && p <= hi);
            prop_assert!(0.0 <= lo && hi <= 1.0);
        }
    }
}
