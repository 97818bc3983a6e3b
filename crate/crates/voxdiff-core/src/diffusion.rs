//! Diffusion training losses and reverse sampling.
//!
//! Training minimizes a noise-prediction term plus a weighted variational
//! term that fits the interpolated log-variance; sampling walks the reduced
//! reverse chain and averages several independent trajectories.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::schedule::{PosteriorCoefficients, ResampledSteps};
use crate::tensor::{phi, Tensor, TensorError};

/// Dynamic range of the target intensity scale (used by the discretized
/// boundary likelihood and by PSNR).
pub const INTENSITY_RANGE: f64 = 2674.0;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("diffusion error: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

/// Anything that can estimate the injected noise and the variance coefficient
/// from a noisy volume, the conditioning volume, and the (original-chain)
/// timestep.
pub trait NoisePredictor {
    fn predict(&self, noisy: &Tensor, cond: &Tensor, n: usize) -> Result<(Tensor, Tensor)>;
}

impl NoisePredictor for crate::model::SwinVnet {
    fn predict(&self, noisy: &Tensor, cond: &Tensor, n: usize) -> Result<(Tensor, Tensor)> {
        self.forward(noisy, cond, n)
            .map_err(|e| DiffusionError::Invalid(e.to_string()))
    }
}

/// Mean-squared error between the injected and predicted noise.
pub fn loss_mean(eps: &Tensor, eps_pred: &Tensor) -> Result<Tensor> {
    let d = eps_pred.sub(eps)?;
    let n = d.numel() as f64;
    Ok(d.mul(&d)?.sum_all().mul_scalar(1.0 / n))
}

/// Interpolated log-variance from the coefficient field `k` in [-1, 1]:
/// `logvar = (1+k)/2 * ln(beta) + (1-k)/2 * ln(beta_tilde)`.
/// `beta_tilde` is floored to keep the first-step log finite.
pub fn interpolate_logvar(k: &Tensor, coeff: &PosteriorCoefficients) -> Result<Tensor> {
    let lb = coeff.beta.ln();
    let lbt = coeff.variance.max(1e-20).ln();
    let half_sum = 0.5 * (lb + lbt);
    let half_diff = 0.5 * (lb - lbt);
    // logvar = half_sum + k * half_diff
    Ok(k.mul_scalar(half_diff).add_scalar(half_sum))
}

/// Scalar variance from a scalar coefficient, with exact endpoints: `k = 1`
/// yields the forward-step variance, `k = -1` the posterior variance.
pub fn variance_from_coeff(k: f64, coeff: &PosteriorCoefficients) -> f64 {
    if k >= 1.0 {
        return coeff.beta;
    }
    if k <= -1.0 {
        return coeff.variance;
    }
    let lb = coeff.beta.ln();
    let lbt = coeff.variance.max(1e-20).ln();
    (0.5 * (1.0 + k) * lb + 0.5 * (1.0 - k) * lbt).exp()
}

/// Reverse-step mean reconstructed from the noise estimate:
/// `mu = (x_n - beta/sqrt(1 - alpha_bar) * eps) / sqrt(1 - beta)`.
pub fn mean_from_noise(
    xn: &Tensor,
    eps: &Tensor,
    beta: f64,
    alpha_bar: f64,
) -> Result<Tensor> {
    let c = beta / (1.0 - alpha_bar).sqrt();
    Ok(xn.sub(&eps.mul_scalar(c))?
        .mul_scalar(1.0 / (1.0 - beta).sqrt()))
}

/// Per-voxel KL between the true posterior `N(mu_q, var_q)` and the learned
/// step `N(mu, exp(logvar))`, averaged over voxels. `mu_q`/`var_q` are plain
/// values (no gradient flows into the reference).
fn gaussian_kl_mean(
    mu_q: &[f64],
    var_q: f64,
    mu: &Tensor,
    logvar: &Tensor,
) -> Result<Tensor> {
    let n = mu_q.len();
    if mu.numel() != n || logvar.numel() != n {
        return Err(DiffusionError::Invalid(
            "KL operands must share the voxel count".into(),
        ));
    }
    let muq = Tensor::constant(mu.shape(), mu_q.to_vec())?;
    let lvq = var_q.max(1e-20).ln();
    // KL = 0.5 * (logvar - lvq) + (var_q + (mu_q - mu)^2) / (2 exp(logvar)) - 0.5
    let d = muq.sub(mu)?;
    let num = d.mul(&d)?.add_scalar(var_q);
    let inv = logvar.neg().exp();
    let term = num.mul(&inv)?.mul_scalar(0.5);
    let kl = logvar.add_scalar(-lvq).mul_scalar(0.5).add(&term)?.add_scalar(-0.5);
    Ok(kl.sum_all().mul_scalar(1.0 / n as f64))
}

/// Mean negative log-likelihood of the final denoising step under a
/// discretized Gaussian: each target voxel owns a bin of width
/// `2/INTENSITY_RANGE` on the normalized scale, with open-ended bins at the
/// extremes.
fn discretized_nll_mean(x0: &[f64], mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let n = x0.len();
    let half_bin = 1.0 / INTENSITY_RANGE;
    let mu_d = mu.data().to_vec();
    let lv_d = logvar.data().to_vec();
    let mut nll = vec![0.0; n];
    let mut dmu = vec![0.0; n];
    let mut dlv = vec![0.0; n];
    for i in 0..n {
        let std = (0.5 * lv_d[i]).exp().max(1e-12);
        let zp = if x0[i] >= 1.0 - half_bin {
            f64::INFINITY
        } else {
            (x0[i] + half_bin - mu_d[i]) / std
        };
        let zm = if x0[i] <= -1.0 + half_bin {
            f64::NEG_INFINITY
        } else {
            (x0[i] - half_bin - mu_d[i]) / std
        };
        let cp = if zp.is_infinite() { 1.0 } else { phi(zp) };
        let cm = if zm.is_infinite() { 0.0 } else { phi(zm) };
        let p = (cp - cm).max(1e-12);
        nll[i] = -p.ln();
        // d phi(z)/dz = pdf(z); dz/dmu = -1/std, dz/dlogvar = -z/2
        let pdfp = if zp.is_finite() {
            (-(zp * zp) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
        } else {
            0.0
        };
        let pdfm = if zm.is_finite() {
            (-(zm * zm) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
        } else {
            0.0
        };
        let dp_dmu = (pdfm - pdfp) / std;
        let dp_dlv = -0.5 * (pdfp * if zp.is_finite() { zp } else { 0.0 }
            - pdfm * if zm.is_finite() { zm } else { 0.0 });
        if p > 1e-12 {
            dmu[i] = -dp_dmu / p;
            dlv[i] = -dp_dlv / p;
        }
    }
    let scale = 1.0 / n as f64;
    let total: f64 = nll.iter().sum::<f64>() * scale;
    Ok(Tensor::from_op(
        vec![1],
        vec![total],
        vec![mu.clone(), logvar.clone()],
        Box::new(move |ctx| {
            let g = ctx.grad[0] * scale;
            vec![
                dmu.iter().map(|&d| d * g).collect(),
                dlv.iter().map(|&d| d * g).collect(),
            ]
        }),
    ))
}

/// Variational term for one training example at reduced-chain index `j`
/// (1-based). For `j > 1` this is the KL between the true posterior and the
/// learned step; for `j = 1` it is the discretized boundary likelihood. The
/// mean path is detached so this term trains only the variance head.
#[allow(clippy::too_many_arguments)]
pub fn loss_vlb(
    x0: &Tensor,
    xn: &Tensor,
    eps_pred: &Tensor,
    k: &Tensor,
    steps: &ResampledSteps,
    j: usize,
) -> Result<Tensor> {
    let coeff = steps.posterior(j);
    let logvar = interpolate_logvar(k, &coeff)?;
    let mu = mean_from_noise(xn, &eps_pred.detach(), coeff.beta, steps.alpha_bar(j))?;
    if j > 1 {
        let x0d = x0.data();
        let xnd = xn.data();
        let mu_q: Vec<f64> = x0d
            .iter()
            .zip(xnd.iter())
            .map(|(&a, &b)| coeff.coef_x0 * a + coeff.coef_xn * b)
            .collect();
        gaussian_kl_mean(&mu_q, coeff.variance, &mu, &logvar)
    } else {
        discretized_nll_mean(x0.data(), &mu, &logvar)
    }
}

/// Hybrid objective: noise-prediction MSE plus `gamma` times the variational
/// term. `gamma` is the ratio of reduced to full chain length.
pub fn total_loss(
    x0: &Tensor,
    xn: &Tensor,
    eps: &Tensor,
    eps_pred: &Tensor,
    k: &Tensor,
    steps: &ResampledSteps,
    j: usize,
    gamma: f64,
) -> Result<Tensor> {
    let lm = loss_mean(eps, eps_pred)?;
    let lv = loss_vlb(x0, xn, eps_pred, k, steps, j)?;
    Ok(lm.add(&lv.mul_scalar(gamma))?)
}

/// One reverse step on the reduced chain: reconstructs the mean from the
/// noise estimate and adds noise scaled by the interpolated deviation.
/// `rng = None` performs the final deterministic step (zero noise).
pub fn reverse_step(
    xj: &Tensor,
    eps_pred: &Tensor,
    k: &Tensor,
    steps: &ResampledSteps,
    j: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor> {
    let coeff = steps.posterior(j);
    let mu = mean_from_noise(xj, eps_pred, coeff.beta, steps.alpha_bar(j))?;
    let mut out = mu.data().to_vec();
    if let Some(rng) = rng {
        let kd = k.data();
        for (i, v) in out.iter_mut().enumerate() {
            let std = variance_from_coeff(kd[i], &coeff).sqrt();
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(Tensor::constant(xj.shape(), out)?)
}

/// Draws one full reverse trajectory from pure noise, conditioned on `cond`,
/// and returns the final sample.
pub fn sample_once<P: NoisePredictor>(
    model: &P,
    cond: &Tensor,
    steps: &ResampledSteps,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let sh = cond.shape().to_vec();
    let n = cond.numel();
    let start: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut x = Tensor::constant(&sh, start)?;
    for j in (1..=steps.len()).rev() {
        let (eps, k) = model.predict(&x, cond, steps.step(j))?;
        let noise_rng = if j > 1 { Some(&mut *rng) } else { None };
        x = reverse_step(&x, &eps, &k, steps, j, noise_rng)?;
    }
    Ok(x)
}

/// Monte Carlo generation: averages `runs` independent reverse trajectories.
pub fn generate<P: NoisePredictor>(
    model: &P,
    cond: &Tensor,
    steps: &ResampledSteps,
    runs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if runs == 0 {
        return Err(DiffusionError::Invalid("runs must be positive".into()));
    }
    let mut acc = vec![0.0; cond.numel()];
    for _ in 0..runs {
        let x = sample_once(model, cond, steps, rng)?;
        for (a, &v) in acc.iter_mut().zip(x.data().iter()) {
            *a += v;
        }
    }
    for a in &mut acc {
        *a /= runs as f64;
    }
    Ok(Tensor::constant(cond.shape(), acc)?)
}
