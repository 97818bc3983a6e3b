//! Windowed multi-head self-attention over 3D feature maps, with the
//! shifted-window variant realized as a cyclic roll before partitioning.

use rand_chacha::ChaCha8Rng;

use super::ModelError;
use crate::tensor::Tensor;

use super::layers::{init_values, Init};

type Result<T> = std::result::Result<T, ModelError>;

/// Index plan mapping `[C,H,W,L]` features to window-major token rows and
/// back. Partition and merge are exact inverses by construction.
#[derive(Debug)]
pub struct WindowPlan {
    pub windows: usize,
    pub tokens: usize,
    forward: Vec<usize>,
    inverse: Vec<usize>,
    channels: usize,
    extents: [usize; 3],
}

impl WindowPlan {
    pub fn new(channels: usize, extents: [usize; 3], win: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if win[a] == 0 || extents[a] % win[a] != 0 {
                return Err(ModelError::Geometry(format!(
                    "extent {} on axis {a} must be divisible by window size {}",
                    extents[a], win[a]
                )));
            }
        }
        let [h, w, l] = extents;
        let counts = [h / win[0], w / win[1], l / win[2]];
        let windows = counts[0] * counts[1] * counts[2];
        let tokens = win[0] * win[1] * win[2];
        let mut forward = vec![0usize; windows * tokens * channels];
        let mut inverse = vec![0usize; windows * tokens * channels];
        let mut row = 0;
        for wh in 0..counts[0] {
            for ww in 0..counts[1] {
                for wl in 0..counts[2] {
                    for ih in 0..win[0] {
                        for iw in 0..win[1] {
                            for il in 0..win[2] {
                                let (gh, gw, gl) =
                                    (wh * win[0] + ih, ww * win[1] + iw, wl * win[2] + il);
                                for c in 0..channels {
                                    let src = ((c * h + gh) * w + gw) * l + gl;
                                    let dst = row * channels + c;
                                    forward[dst] = src;
                                    inverse[src] = dst;
                                }
                                row += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(WindowPlan {
            windows,
            tokens,
            forward,
            inverse,
            channels,
            extents,
        })
    }

    /// `[C,H,W,L]` -> `[windows*tokens, C]`, window-major.
    pub fn partition(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.gather(
            self.forward.clone(),
            &[self.windows * self.tokens, self.channels],
        )?)
    }

    /// `[windows*tokens, C]` -> `[C,H,W,L]`; exact inverse of [`Self::partition`].
    pub fn merge(&self, tokens: &Tensor) -> Result<Tensor> {
        let [h, w, l] = self.extents;
        Ok(tokens.gather(self.inverse.clone(), &[self.channels, h, w, l])?)
    }
}

/// Cyclic roll of the spatial axes of a `[C,H,W,L]` tensor. `unshift` with the
/// same offsets is the exact inverse.
pub fn cyclic_shift(x: &Tensor, offsets: [usize; 3], invert: bool) -> Result<Tensor> {
    let sh = x.shape();
    if sh.len() != 4 {
        return Err(ModelError::Geometry(format!(
            "cyclic_shift expects [C,H,W,L], got {sh:?}"
        )));
    }
    let (c, h, w, l) = (sh[0], sh[1], sh[2], sh[3]);
    let off = |o: usize, e: usize| if invert { (e - o % e) % e } else { o % e };
    let (oh, ow, ol) = (off(offsets[0], h), off(offsets[1], w), off(offsets[2], l));
    let mut idx = Vec::with_capacity(c * h * w * l);
    for ci in 0..c {
        for hi in 0..h {
            let sh_ = (hi + oh) % h;
            for wi in 0..w {
                let sw_ = (wi + ow) % w;
                for li in 0..l {
                    let sl_ = (li + ol) % l;
                    idx.push(((ci * h + sh_) * w + sw_) * l + sl_);
                }
            }
        }
    }
    Ok(x.gather(idx, sh)?)
}

/// Multi-head self-attention applied independently inside each window.
#[derive(Clone)]
pub struct WindowAttention {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    heads: usize,
    channels: usize,
}

impl WindowAttention {
    pub fn new(channels: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(ModelError::Config(format!(
                "{channels} channels not divisible by {heads} heads"
            )));
        }
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::param(
                &[channels, channels],
                init_values(channels * channels, Init::TruncNormal, rng),
            )
        };
        Ok(WindowAttention {
            wq: mk(rng)?,
            wk: mk(rng)?,
            wv: mk(rng)?,
            wo: mk(rng)?,
            heads,
            channels,
        })
    }

    /// `x` is `[C,H,W,L]`; `win` must divide the extents. `shift` of zero is
    /// plain window attention; nonzero applies a cyclic roll first and the
    /// inverse roll after.
    pub fn forward(&self, x: &Tensor, win: [usize; 3], shift: [usize; 3]) -> Result<Tensor> {
        let sh = x.shape().to_vec();
        let c = sh[0];
        if c != self.channels {
            return Err(ModelError::Geometry(format!(
                "attention built for {} channels, input has {c}",
                self.channels
            )));
        }
        let shifted = if shift.iter().any(|&s| s > 0) {
            cyclic_shift(x, shift, false)?
        } else {
            x.clone()
        };
        let plan = WindowPlan::new(c, [sh[1], sh[2], sh[3]], win)?;
        let tokens = plan.partition(&shifted)?; // [nw*t, C]
        let q = tokens.matmul(&self.wq, false)?;
        let k = tokens.matmul(&self.wk, false)?;
        let v = tokens.matmul(&self.wv, false)?;
        let dk = c / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let t = plan.tokens;
        let mut window_outs = Vec::with_capacity(plan.windows);
        for wi in 0..plan.windows {
            let row_idx: Vec<usize> = (wi * t * c..(wi + 1) * t * c).collect();
            let qw = q.gather(row_idx.clone(), &[t, c])?;
            let kw = k.gather(row_idx.clone(), &[t, c])?;
            let vw = v.gather(row_idx, &[t, c])?;
            let mut heads_out = Vec::with_capacity(self.heads);
            for hh in 0..self.heads {
                let col_idx: Vec<usize> = (0..t)
                    .flat_map(|r| (hh * dk..(hh + 1) * dk).map(move |cc| r * c + cc))
                    .collect();
                let qh = qw.gather(col_idx.clone(), &[t, dk])?;
                let kh = kw.gather(col_idx.clone(), &[t, dk])?;
                let vh = vw.gather(col_idx, &[t, dk])?;
                let scores = qh.matmul(&kh, true)?.mul_scalar(scale).softmax_last();
                heads_out.push(scores.matmul(&vh, false)?);
            }
            let concat = Tensor::concat(&heads_out, 1)?; // [t, C]
            window_outs.push(concat.matmul(&self.wo, false)?);
        }
        let all = Tensor::concat(&window_outs, 0)?; // [nw*t, C]
        let merged = plan.merge(&all)?;
        if shift.iter().any(|&s| s > 0) {
            cyclic_shift(&merged, shift, true)
        } else {
            Ok(merged)
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.wo"), &mut self.wo);
    }
}
