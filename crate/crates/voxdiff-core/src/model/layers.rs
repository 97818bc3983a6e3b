//! Parameterized layers shared by the convolutional and attention blocks.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ModelError;
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy)]
pub enum Init {
    /// Truncated normal, std 0.02 (attention and linear weights).
    TruncNormal,
    /// Normal scaled by 1/sqrt(fan_in) (convolution weights).
    FanIn(usize),
    /// All zeros (the final output convolution).
    Zero,
}

pub fn init_values(n: usize, init: Init, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match init {
        Init::Zero => vec![0.0; n],
        Init::TruncNormal => (0..n)
            .map(|_| loop {
                let v: f64 = rng.sample::<f64, _>(StandardNormal) * 0.02;
                if v.abs() <= 0.04 {
                    break v;
                }
            })
            .collect(),
        Init::FanIn(fan_in) => {
            let std = (1.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect()
        }
    }
}

#[derive(Clone)]
pub struct Conv3d {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv3d {
    pub fn new(cin: usize, cout: usize, k: usize, init: Init, rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = cout * cin * k * k * k;
        Ok(Conv3d {
            weight: Tensor::param(&[cout, cin, k, k, k], init_values(n, init, rng))?,
            bias: Tensor::param(&[cout], vec![0.0; cout])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv3d(&self.weight, &self.bias)?)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Clone)]
pub struct GroupNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    groups: usize,
}

impl GroupNorm {
    /// Group count is the configured cap clamped to the channel count.
    pub fn new(channels: usize, cap: usize) -> Result<Self> {
        let groups = cap.min(channels).max(1);
        if channels % groups != 0 {
            return Err(ModelError::Config(format!(
                "{channels} channels not divisible by {groups} norm groups"
            )));
        }
        Ok(GroupNorm {
            gamma: Tensor::param(&[channels], vec![1.0; channels])?,
            beta: Tensor::param(&[channels], vec![0.0; channels])?,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.group_norm(self.groups, &self.gamma, &self.beta, 1e-5)?)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

#[derive(Clone)]
pub struct Linear {
    pub weight: Tensor, // [din, dout]
    pub bias: Tensor,   // [dout]
}

impl Linear {
    pub fn new(din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Linear {
            weight: Tensor::param(&[din, dout], init_values(din * dout, Init::TruncNormal, rng))?,
            bias: Tensor::param(&[dout], vec![0.0; dout])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.linear(&self.weight, &self.bias)?)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Re-embeds the timestep embedding into a per-channel scale and shift pair.
#[derive(Clone)]
pub struct TimeProj {
    lin: Linear,
    channels: usize,
}

impl TimeProj {
    pub fn new(embed_dim: usize, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(TimeProj {
            lin: Linear::new(embed_dim, 2 * channels, rng)?,
            channels,
        })
    }

    /// `temb` is `[1, d]`; returns `(scale [C], shift [C])`.
    pub fn forward(&self, temb: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = self.lin.forward(&temb.silu())?; // [1, 2C]
        let c = self.channels;
        let flat = out.reshape(&[2 * c])?;
        let sc = flat.gather((0..c).collect(), &[c])?;
        let sh = flat.gather((c..2 * c).collect(), &[c])?;
        Ok((sc, sh))
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.lin.visit(&format!("{prefix}.lin"), f);
    }
}

/// Trilinear resampling to a target resolution followed by a 1x1x1
/// convolution (which also performs the channel change between levels).
#[derive(Clone)]
pub struct Resample {
    conv: Conv3d,
}

impl Resample {
    pub fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Resample {
            conv: Conv3d::new(cin, cout, 1, Init::FanIn(cin), rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor, target: [usize; 3]) -> Result<Tensor> {
        self.conv.forward(&x.resize_trilinear(target)?)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
    }
}
