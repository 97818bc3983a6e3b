//! Forward-process noise schedule: per-timestep variances, cumulative
//! signal-retention products, the closed-form posterior, and timestep
//! resampling for fast reverse chains.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("invalid schedule: {0}")]
    Invalid(String),
    #[error("timestep {n} out of range [1, {max}]")]
    TimestepOutOfRange { n: usize, max: usize },
}

pub type Result<T> = std::result::Result<T, ScheduleError>;

/// Per-timestep variances `beta_1..beta_N` and running products
/// `alpha_bar_n = prod_{i<=n} (1 - beta_i)`, with `alpha_bar_0 = 1`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear schedule `beta_n = slope * n`.
    pub fn linear(max_timestep: usize, slope: f64) -> Result<Self> {
        if max_timestep == 0 {
            return Err(ScheduleError::Invalid("max timestep must be >= 1".into()));
        }
        if slope <= 0.0 {
            return Err(ScheduleError::Invalid(format!(
                "slope must be positive, got {slope}"
            )));
        }
        if slope * max_timestep as f64 >= 1.0 {
            return Err(ScheduleError::Invalid(format!(
                "slope*N = {} >= 1; beta must stay below 1",
                slope * max_timestep as f64
            )));
        }
        let betas: Vec<f64> = (1..=max_timestep).map(|n| slope * n as f64).collect();
        Self::from_betas(betas)
    }

    /// Builds from explicit betas, validating each is in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(ScheduleError::Invalid("empty beta list".into()));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for (i, &b) in betas.iter().enumerate() {
            if !(0.0..1.0).contains(&b) || b == 0.0 {
                return Err(ScheduleError::Invalid(format!(
                    "beta_{} = {b} must lie in (0, 1)",
                    i + 1
                )));
            }
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn max_timestep(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, n: usize) -> Result<()> {
        if n < 1 || n > self.betas.len() {
            return Err(ScheduleError::TimestepOutOfRange {
                n,
                max: self.betas.len(),
            });
        }
        Ok(())
    }

    /// `beta_n`, 1-based.
    pub fn beta(&self, n: usize) -> f64 {
        self.betas[n - 1]
    }

    /// `alpha_bar_n` with the empty-product convention `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, n: usize) -> f64 {
        if n == 0 {
            1.0
        } else {
            self.alpha_bars[n - 1]
        }
    }

    /// Closed-form forward jump: `sqrt(ab_n) x0 + sqrt(1 - ab_n) eps`.
    pub fn q_sample(&self, x0: &[f64], n: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check(n)?;
        if x0.len() != eps.len() {
            return Err(ScheduleError::Invalid(format!(
                "x0 has {} values but eps has {}",
                x0.len(),
                eps.len()
            )));
        }
        let ab = self.alpha_bar(n);
        let (cs, cn) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0
            .iter()
            .zip(eps)
            .map(|(x, e)| cs * x + cn * e)
            .collect())
    }

    /// Coefficients of the true reverse posterior
    /// `q(x_{n-1} | x_n, x_0) = N(c0*x0 + cn*xn, var)`.
    pub fn posterior_coefficients(&self, n: usize) -> Result<PosteriorCoefficients> {
        self.check(n)?;
        Ok(posterior_from(
            self.beta(n),
            self.alpha_bar(n - 1),
            self.alpha_bar(n),
        ))
    }

    /// Posterior mean and variance fields for given `x0` and `xn`.
    pub fn posterior_mean_variance(
        &self,
        x0: &[f64],
        xn: &[f64],
        n: usize,
    ) -> Result<(Vec<f64>, f64)> {
        let c = self.posterior_coefficients(n)?;
        if x0.len() != xn.len() {
            return Err(ScheduleError::Invalid(format!(
                "x0 has {} values but xn has {}",
                x0.len(),
                xn.len()
            )));
        }
        let mean = x0
            .iter()
            .zip(xn)
            .map(|(x0, xn)| c.coef_x0 * x0 + c.coef_xn * xn)
            .collect();
        Ok((mean, c.variance))
    }

    /// Almost-evenly spaced subsampled chain with effective variances
    /// recomputed from alpha-bar ratios so the subsampled marginals match.
    pub fn resample(&self, count: usize) -> Result<ResampledSteps> {
        let n = self.max_timestep();
        if count < 1 {
            return Err(ScheduleError::Invalid("resample count must be >= 1".into()));
        }
        if count > n {
            return Err(ScheduleError::Invalid(format!(
                "resample count {count} exceeds max timestep {n}"
            )));
        }
        let mut steps: Vec<usize> = if count == 1 {
            vec![n]
        } else {
            (0..count)
                .map(|j| {
                    let t = 1.0 + (n as f64 - 1.0) * j as f64 / (count as f64 - 1.0);
                    t.round() as usize
                })
                .collect()
        };
        steps.dedup();
        if *steps.last().unwrap() != n {
            steps.push(n);
        }
        let mut eff_betas = Vec::with_capacity(steps.len());
        let mut prev_ab = 1.0;
        for &s in &steps {
            let ab = self.alpha_bar(s);
            let b = 1.0 - ab / prev_ab;
            debug_assert!(b > 0.0 && b < 1.0);
            eff_betas.push(b);
            prev_ab = ab;
        }
        let alpha_bars = steps.iter().map(|&s| self.alpha_bar(s)).collect();
        Ok(ResampledSteps {
            steps,
            eff_betas,
            alpha_bars,
        })
    }
}

/// Eq-8/9-style posterior coefficients from a (possibly effective) beta and
/// the bracketing alpha-bar products.
pub fn posterior_from(beta: f64, ab_prev: f64, ab_cur: f64) -> PosteriorCoefficients {
    let denom = 1.0 - ab_cur;
    PosteriorCoefficients {
        beta,
        coef_x0: beta * ab_prev.sqrt() / denom,
        coef_xn: (1.0 - beta).sqrt() * (1.0 - ab_prev) / denom,
        variance: beta * (1.0 - ab_prev) / denom,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PosteriorCoefficients {
    /// The (effective) forward-step variance that produced these coefficients.
    pub beta: f64,
    pub coef_x0: f64,
    pub coef_xn: f64,
    pub variance: f64,
}

/// A subsampled reverse chain `s_1 < ... < s_J` with effective betas
/// `beta'_j = 1 - alpha_bar(s_j)/alpha_bar(s_{j-1})`.
#[derive(Debug, Clone)]
pub struct ResampledSteps {
    steps: Vec<usize>,
    eff_betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl ResampledSteps {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Original-chain timestep for 1-based resampled index `j`.
    pub fn step(&self, j: usize) -> usize {
        self.steps[j - 1]
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn eff_beta(&self, j: usize) -> f64 {
        self.eff_betas[j - 1]
    }

    /// `alpha_bar(s_j)` along the subsampled chain (`j = 0` is 1).
    pub fn alpha_bar(&self, j: usize) -> f64 {
        if j == 0 {
            1.0
        } else {
            self.alpha_bars[j - 1]
        }
    }

    /// Posterior coefficients of the subsampled chain at index `j`.
    pub fn posterior(&self, j: usize) -> PosteriorCoefficients {
        posterior_from(self.eff_beta(j), self.alpha_bar(j - 1), self.alpha_bar(j))
    }
}
