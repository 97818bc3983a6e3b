//! Convolutional and Swin-attention blocks of the denoiser.

use rand_chacha::ChaCha8Rng;

use super::attention::WindowAttention;
use super::layers::{Conv3d, GroupNorm, Init, TimeProj};
use super::ModelError;
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, ModelError>;

/// Residual convolutional block: a timestep-expanding linear layer and four
/// kernel-3 convolutions with a scale-shift after the first; the residual
/// connects the first convolution's raw output to the block output, so the
/// block passes low-frequency content through untouched by normalization.
#[derive(Clone)]
pub struct ConvBlock {
    time: TimeProj,
    convs: Vec<Conv3d>,
    norms: Vec<GroupNorm>,
}

impl ConvBlock {
    pub fn new(
        cin: usize,
        cout: usize,
        embed_dim: usize,
        norm_groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(4);
        let mut norms = Vec::with_capacity(4);
        for i in 0..4 {
            let ci = if i == 0 { cin } else { cout };
            convs.push(Conv3d::new(ci, cout, 3, Init::FanIn(ci * 27), rng)?);
            norms.push(GroupNorm::new(cout, norm_groups)?);
        }
        Ok(ConvBlock {
            time: TimeProj::new(embed_dim, cout, rng)?,
            convs,
            norms,
        })
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let (sc, sh) = self.time.forward(temb)?;
        let early = self.convs[0].forward(x)?;
        let mut h = self.norms[0].forward(&early)?;
        h = h.scale_shift(&sc, &sh)?.silu();
        for i in 1..4 {
            h = self.norms[i].forward(&self.convs[i].forward(&h)?)?.silu();
        }
        Ok(h.add(&early)?)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.time.visit(&format!("{prefix}.time"), f);
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit(&format!("{prefix}.conv{i}"), f);
        }
        for (i, n) in self.norms.iter_mut().enumerate() {
            n.visit(&format!("{prefix}.norm{i}"), f);
        }
    }
}

/// Swin-attention block: window attention, a linear embedding layer, then
/// shifted-window attention and a second linear layer, with group norm + SiLU
/// after each module, timestep scale-shift conditioning and a residual across
/// the whole block. Decoder instances carry a 1x1x1 fusion convolution that
/// absorbs the encoder skip concatenation.
#[derive(Clone)]
pub struct SwinBlock {
    in_proj: Option<Conv3d>,
    time: TimeProj,
    wsa: WindowAttention,
    lin1: Conv3d,
    norm1: GroupNorm,
    swsa: WindowAttention,
    lin2: Conv3d,
    norm2: GroupNorm,
    window: [usize; 3],
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        channels: usize,
        heads: usize,
        window: [usize; 3],
        embed_dim: usize,
        norm_groups: usize,
        fused_input: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let in_proj = match fused_input {
            Some(cin) => Some(Conv3d::new(cin, channels, 1, Init::FanIn(cin), rng)?),
            None => None,
        };
        Ok(SwinBlock {
            in_proj,
            time: TimeProj::new(embed_dim, channels, rng)?,
            wsa: WindowAttention::new(channels, heads, rng)?,
            lin1: Conv3d::new(channels, channels, 1, Init::TruncNormal, rng)?,
            norm1: GroupNorm::new(channels, norm_groups)?,
            swsa: WindowAttention::new(channels, heads, rng)?,
            lin2: Conv3d::new(channels, channels, 1, Init::TruncNormal, rng)?,
            norm2: GroupNorm::new(channels, norm_groups)?,
            window,
        })
    }

    /// Window extents clamped to the feature resolution; divisibility of the
    /// remaining extents is enforced by the partition.
    fn effective_window(&self, extents: [usize; 3]) -> [usize; 3] {
        [
            self.window[0].min(extents[0]),
            self.window[1].min(extents[1]),
            self.window[2].min(extents[2]),
        ]
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let x = match &self.in_proj {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        let sh = x.shape();
        let win = self.effective_window([sh[1], sh[2], sh[3]]);
        let shift = [win[0] / 2, win[1] / 2, win[2] / 2];
        let (sc, shf) = self.time.forward(temb)?;

        let y = self.wsa.forward(&x, win, [0, 0, 0])?;
        let y = self.lin1.forward(&y)?;
        let y = self.norm1.forward(&y)?.silu();
        let y = y.scale_shift(&sc, &shf)?;

        let z = self.swsa.forward(&y, win, shift)?;
        let z = self.lin2.forward(&z)?;
        let z = self.norm2.forward(&z)?.silu();

        Ok(x.add(&z)?)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(p) = &mut self.in_proj {
            p.visit(&format!("{prefix}.in_proj"), f);
        }
        self.time.visit(&format!("{prefix}.time"), f);
        self.wsa.visit(&format!("{prefix}.wsa"), f);
        self.lin1.visit(&format!("{prefix}.lin1"), f);
        self.norm1.visit(&format!("{prefix}.norm1"), f);
        self.swsa.visit(&format!("{prefix}.swsa"), f);
        self.lin2.visit(&format!("{prefix}.lin2"), f);
        self.norm2.visit(&format!("{prefix}.norm2"), f);
    }
}
