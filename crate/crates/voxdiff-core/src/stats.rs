//! Paired-difference significance testing.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("invalid statistics input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// Result of a two-sided paired t-test.
#[derive(Debug, Clone, Copy)]
pub struct PairedTTest {
    pub mean_difference: f64,
    pub t_statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
}

/// Log of the t-density normalization constant for `nu` degrees of freedom.
fn log_t_norm(nu: f64) -> f64 {
    libm::lgamma((nu + 1.0) / 2.0)
        - libm::lgamma(nu / 2.0)
        - 0.5 * (nu * std::f64::consts::PI).ln()
}

/// Upper-tail probability `P(T > t)` of the t distribution, by numerically
/// integrating the density from `t` with substitution `x = t + u/(1-u)`
/// mapping the infinite tail onto (0, 1).
pub fn t_upper_tail(t: f64, df: usize) -> Result<f64> {
    if df == 0 {
        return Err(StatsError::Invalid("zero degrees of freedom".into()));
    }
    if t < 0.0 {
        return Ok(1.0 - t_upper_tail(-t, df)?);
    }
    let nu = df as f64;
    let log_c = log_t_norm(nu);
    let density = |x: f64| (log_c - (nu + 1.0) / 2.0 * (1.0 + x * x / nu).ln()).exp();
    // midpoint rule on the transformed tail
    let steps = 200_000;
    let h = 1.0 / steps as f64;
    let mut acc = 0.0;
    for i in 0..steps {
        let u = (i as f64 + 0.5) * h;
        let x = t + u / (1.0 - u);
        let jac = 1.0 / ((1.0 - u) * (1.0 - u));
        acc += density(x) * jac * h;
    }
    Ok(acc.clamp(0.0, 1.0))
}

/// Two-sided paired t-test on per-case metric values. Requires at least two
/// pairs and a nonzero difference variance.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(StatsError::Invalid(format!(
            "paired samples must match in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(StatsError::Invalid(format!(
            "need at least 2 pairs, got {n}"
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return Err(StatsError::Invalid(
            "zero variance of the paired differences".into(),
        ));
    }
    let t = mean / (var / n as f64).sqrt();
    let df = n - 1;
    let p = (2.0 * t_upper_tail(t.abs(), df)?).min(1.0);
    Ok(PairedTTest {
        mean_difference: mean,
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference upper-tail values from published t tables:
    // P(T > t) for the classic critical points.
    const TABLE: &[(f64, usize, f64)] = &[
        (0.0, 5, 0.5),
        (1.0, 1, 0.25),
        (6.314, 1, 0.05),
        (2.920, 2, 0.05),
        (2.015, 5, 0.05),
        (1.812, 10, 0.05),
        (2.228, 10, 0.025),
        (2.764, 10, 0.01),
        (1.725, 20, 0.05),
        (2.086, 20, 0.025),
    ];

    #[test]
    fn tail_matches_published_critical_points() {
        for &(t, df, p) in TABLE {
            let got = t_upper_tail(t, df).unwrap();
            assert!((got - p).abs() < 5e-4, "t={t} df={df}: {got} vs {p}");
        }
    }

    #[test]
    fn tail_symmetry() {
        for df in [1, 3, 30] {
            let up = t_upper_tail(1.7, df).unwrap();
            let lo = t_upper_tail(-1.7, df).unwrap();
            assert!((up + lo - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn large_df_approaches_normal_tail() {
        // P(T > 1.96) -> 0.025 as df grows
        let got = t_upper_tail(1.96, 1000).unwrap();
        assert!((got - 0.025).abs() < 1e-3, "{got}");
    }

    #[test]
    fn paired_test_hand_computed() {
        // diffs = [1, 2, 3]: mean 2, sd 1, t = 2/(1/sqrt(3)) = 3.4641, df 2
        let a = [3.0, 5.0, 7.0];
        let b = [2.0, 3.0, 4.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert!((r.mean_difference - 2.0).abs() < 1e-12);
        assert!((r.t_statistic - 3.464101615).abs() < 1e-8);
        assert_eq!(r.degrees_of_freedom, 2);
        // reference two-sided p (scipy.stats.ttest_rel): 0.074179...
        assert!((r.p_value - 0.0742).abs() < 5e-4, "{}", r.p_value);
    }

    #[test]
    fn paired_test_closed_form_cauchy_case() {
        // diffs [1, 3]: mean 2, sd sqrt(2), t = 2, df = 1. The df = 1 tail
        // is Cauchy, so p = 1 - 2 atan(2)/pi exactly.
        let a = [3.0, 5.0];
        let b = [2.0, 2.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert!((r.t_statistic - 2.0).abs() < 1e-12, "{}", r.t_statistic);
        let expect = 1.0 - 2.0 * (2.0f64).atan() / std::f64::consts::PI;
        assert!((r.p_value - expect).abs() < 1e-5, "{} vs {expect}", r.p_value);
    }

    #[test]
    fn sign_of_difference_does_not_change_p() {
        let a = [3.0, 5.0, 7.0, 4.0];
        let b = [2.0, 3.0, 4.0, 1.0];
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        assert!((ab.p_value - ba.p_value).abs() < 1e-9);
        assert!((ab.t_statistic + ba.t_statistic).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[2.0]).is_err());
        // constant difference => zero variance
        assert!(paired_t_test(&[3.0, 4.0], &[1.0, 2.0]).is_err());
    }
}
