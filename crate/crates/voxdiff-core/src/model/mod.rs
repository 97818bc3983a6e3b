//! The conditional denoiser: a U-shaped encoder/decoder with convolutional
//! blocks at the full resolution and shifted-window attention blocks at the
//! downsampled levels, conditioned on the timestep. Emits a noise estimate
//! and a variance-interpolation coefficient.

pub mod attention;
pub mod blocks;
pub mod embed;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};
use blocks::{ConvBlock, SwinBlock};
use layers::{Conv3d, Init, Resample};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model configuration error: {0}")]
    Config(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SwinConfig {
    /// Channel widths from the convolutional level to the deepest attention
    /// level.
    pub channels: [usize; 5],
    /// Attention heads at every attention level.
    pub heads: usize,
    /// In-plane window sizes for attention levels 1-4.
    pub window_inplane: [usize; 4],
    /// Depth-axis window sizes for attention levels 1-4.
    pub window_depth: [usize; 4],
    /// Timestep embedding dimension.
    pub embed_dim: usize,
    /// Maximum sinusoidal period.
    pub max_period: f64,
    /// Group-normalization group cap (clamped to the channel count).
    pub norm_groups: usize,
}

impl Default for SwinConfig {
    fn default() -> Self {
        SwinConfig {
            channels: [32, 64, 128, 256, 256],
            heads: 4,
            window_inplane: [4, 4, 4, 2],
            window_depth: [4, 2, 2, 2],
            embed_dim: 128,
            max_period: 1e6,
            norm_groups: 32,
        }
    }
}

impl SwinConfig {
    /// Small configuration for fast tests and smoke training.
    pub fn toy() -> Self {
        SwinConfig {
            channels: [8, 16, 16, 16, 16],
            heads: 2,
            norm_groups: 8,
            ..SwinConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(ModelError::Config(format!(
                "embed_dim must be even and positive, got {}",
                self.embed_dim
            )));
        }
        for (i, &c) in self.channels.iter().enumerate() {
            if c == 0 {
                return Err(ModelError::Config(format!("channel width {i} is zero")));
            }
            if i > 0 && c % self.heads != 0 {
                return Err(ModelError::Config(format!(
                    "channel width {c} not divisible by {} heads",
                    self.heads
                )));
            }
        }
        for a in 0..4 {
            if self.window_inplane[a] == 0 || self.window_depth[a] == 0 {
                return Err(ModelError::Config("zero window size".into()));
            }
        }
        Ok(())
    }

    fn window(&self, level: usize) -> [usize; 3] {
        [
            self.window_inplane[level],
            self.window_inplane[level],
            self.window_depth[level],
        ]
    }
}

/// Resolution chain produced by halving each axis (saturating at 1) once per
/// resampling level. Rejects extents that would need padding.
pub fn resolution_chain(input: [usize; 3], levels: usize) -> Result<Vec<[usize; 3]>> {
    let mut chain = vec![input];
    let mut cur = input;
    for level in 1..=levels {
        for (axis, e) in cur.iter_mut().enumerate() {
            if *e == 1 {
                continue;
            }
            if *e % 2 != 0 {
                return Err(ModelError::Geometry(format!(
                    "extent {} on axis {axis} at level {level} is odd; every \
                     extent must halve to 1 or stay even across {levels} \
                     resamplings (use extents of the form m*2^k)",
                    *e
                )));
            }
            *e /= 2;
        }
        chain.push(cur);
    }
    Ok(chain)
}

/// The Swin-attention V-net denoiser.
#[derive(Clone)]
pub struct SwinVnet {
    pub config: SwinConfig,
    early: Conv3d,
    enc_conv: ConvBlock,
    enc_downs: Vec<Resample>,
    enc_attn: Vec<SwinBlock>,
    mid1: SwinBlock,
    mid2: SwinBlock,
    dec_ups: Vec<Resample>,
    dec_attn: Vec<SwinBlock>,
    up_final: Resample,
    dec_conv: ConvBlock,
    out_conv: Conv3d,
}

impl SwinVnet {
    pub fn new(config: SwinConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let d = config.embed_dim;
        let g = config.norm_groups;

        let early = Conv3d::new(2, c[0], 1, Init::FanIn(2), &mut rng)?;
        let enc_conv = ConvBlock::new(c[0], c[0], d, g, &mut rng)?;
        // five down-sampling steps: conv level then four attention levels
        let mut enc_downs = Vec::with_capacity(5);
        enc_downs.push(Resample::new(c[0], c[1], &mut rng)?);
        for i in 0..4 {
            let cout = if i + 2 <= 4 { c[i + 2] } else { c[4] };
            enc_downs.push(Resample::new(c[i + 1], cout, &mut rng)?);
        }
        let mut enc_attn = Vec::with_capacity(4);
        for i in 0..4 {
            enc_attn.push(SwinBlock::new(
                c[i + 1],
                config.heads,
                config.window(i),
                d,
                g,
                None,
                &mut rng,
            )?);
        }
        let mid1 = SwinBlock::new(c[4], config.heads, config.window(3), d, g, None, &mut rng)?;
        let mid2 = SwinBlock::new(c[4], config.heads, config.window(3), d, g, None, &mut rng)?;

        // decoder: upsample to each encoder resolution, fuse the skip, attend
        let mut dec_ups = Vec::with_capacity(4);
        let mut dec_attn = Vec::with_capacity(4);
        for i in (0..4).rev() {
            // arriving at attention level i+1 (resolution of enc_attn[i])
            let cin = if i == 3 { c[4] } else { c[i + 2] };
            dec_ups.push(Resample::new(cin, c[i + 1], &mut rng)?);
            dec_attn.push(SwinBlock::new(
                c[i + 1],
                config.heads,
                config.window(i),
                d,
                g,
                Some(2 * c[i + 1]),
                &mut rng,
            )?);
        }
        let up_final = Resample::new(c[1], c[0], &mut rng)?;
        let dec_conv = ConvBlock::new(2 * c[0], c[0], d, g, &mut rng)?;
        // zero-initialized output head: training starts from eps = 0, k = 0
        let out_conv = Conv3d::new(c[0], 2, 3, Init::Zero, &mut rng)?;

        Ok(SwinVnet {
            config,
            early,
            enc_conv,
            enc_downs,
            enc_attn,
            mid1,
            mid2,
            dec_ups,
            dec_attn,
            up_final,
            dec_conv,
            out_conv,
        })
    }

    /// Forward pass on one patch pair. `noisy_ct` and `mr` are `[1,H,W,L]`
    /// tensors sharing extents; returns the noise estimate and the variance
    /// interpolation coefficient (saturated to (-1, 1)), both `[1,H,W,L]`.
    pub fn forward(&self, noisy_ct: &Tensor, mr: &Tensor, n: usize) -> Result<(Tensor, Tensor)> {
        let sh = noisy_ct.shape();
        if sh.len() != 4 || sh[0] != 1 || mr.shape() != sh {
            return Err(ModelError::Geometry(format!(
                "expected two [1,H,W,L] inputs with equal extents, got {:?} and {:?}",
                sh,
                mr.shape()
            )));
        }
        let input_ext = [sh[1], sh[2], sh[3]];
        let chain = resolution_chain(input_ext, 5)?;
        let temb_values = embed::sinusoidal_embed(n, self.config.embed_dim, self.config.max_period)?;
        let temb = Tensor::constant(&[1, self.config.embed_dim], temb_values)?;

        let x = Tensor::concat(&[noisy_ct.clone(), mr.clone()], 0)?;
        let x = self.early.forward(&x)?;

        // encoder
        let s0 = self.enc_conv.forward(&x, &temb)?;
        let mut x = self.enc_downs[0].forward(&s0, chain[1])?;
        let mut skips = Vec::with_capacity(4);
        for i in 0..4 {
            let s = self.enc_attn[i].forward(&x, &temb)?;
            x = self.enc_downs[i + 1].forward(&s, chain[i + 2])?;
            skips.push(s);
        }

        // middle
        let x = self.mid1.forward(&x, &temb)?;
        let mut x = self.mid2.forward(&x, &temb)?;

        // decoder
        for (di, i) in (0..4).rev().enumerate() {
            let up = self.dec_ups[di].forward(&x, chain[i + 1])?;
            let fused = Tensor::concat(&[up, skips[i].clone()], 0)?;
            x = self.dec_attn[di].forward(&fused, &temb)?;
        }
        let up = self.up_final.forward(&x, chain[0])?;
        let fused = Tensor::concat(&[up, s0], 0)?;
        let x = self.dec_conv.forward(&fused, &temb)?;
        let out = self.out_conv.forward(&x)?; // [2,H,W,L]

        let spatial = input_ext[0] * input_ext[1] * input_ext[2];
        let eps = out.gather((0..spatial).collect(), &[1, input_ext[0], input_ext[1], input_ext[2]])?;
        let k_raw = out.gather(
            (spatial..2 * spatial).collect(),
            &[1, input_ext[0], input_ext[1], input_ext[2]],
        )?;
        Ok((eps, k_raw.tanh()))
    }

    /// Visits every parameter leaf in a stable order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.early.visit("early", f);
        self.enc_conv.visit("enc_conv", f);
        for (i, d) in self.enc_downs.iter_mut().enumerate() {
            d.visit(&format!("enc_down{i}"), f);
        }
        for (i, b) in self.enc_attn.iter_mut().enumerate() {
            b.visit(&format!("enc_attn{i}"), f);
        }
        self.mid1.visit("mid1", f);
        self.mid2.visit("mid2", f);
        for (i, u) in self.dec_ups.iter_mut().enumerate() {
            u.visit(&format!("dec_up{i}"), f);
        }
        for (i, b) in self.dec_attn.iter_mut().enumerate() {
            b.visit(&format!("dec_attn{i}"), f);
        }
        self.up_final.visit("up_final", f);
        self.dec_conv.visit("dec_conv", f);
        self.out_conv.visit("out_conv", f);
    }

    /// Clones of all parameter leaves, in visit order.
    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        let mut this = self.clone();
        this.visit_params(&mut |_, t| out.push(t.clone()));
        out
    }

    /// Replaces every parameter, in visit order.
    pub fn set_params(&mut self, params: &[Tensor]) -> Result<()> {
        let mut idx = 0;
        let mut err = None;
        self.visit_params(&mut |name, t| {
            if idx >= params.len() {
                err.get_or_insert(format!("too few parameters at {name}"));
                return;
            }
            if params[idx].shape() != t.shape() {
                err.get_or_insert(format!(
                    "parameter {name}: shape {:?} != {:?}",
                    params[idx].shape(),
                    t.shape()
                ));
                return;
            }
            *t = params[idx].clone();
            idx += 1;
        });
        if let Some(e) = err {
            return Err(ModelError::Config(e));
        }
        if idx != params.len() {
            return Err(ModelError::Config(format!(
                "expected {idx} parameters, got {}",
                params.len()
            )));
        }
        Ok(())
    }
}
