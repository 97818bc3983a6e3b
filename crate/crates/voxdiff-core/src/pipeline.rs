//! Patch extraction and Gaussian-weighted sliding-window inference over
//! whole volumes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffusion::{generate, DiffusionError, NoisePredictor};
use crate::schedule::ResampledSteps;
use crate::tensor::{no_grad, Tensor};
use crate::volume::{IntensitySpace, Volume};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("patch geometry error: {0}")]
    Geometry(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("volume error: {0}")]
    Volume(#[from] crate::volume::VolumeError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Offsets of overlapping patch windows covering `extents` with stride
/// `patch/2` per axis; the last window on each axis is clamped so every
/// voxel is covered without stepping out of bounds.
pub fn window_offsets(extents: [usize; 3], patch: [usize; 3]) -> Result<Vec<[usize; 3]>> {
    for a in 0..3 {
        if patch[a] == 0 || patch[a] > extents[a] {
            return Err(PipelineError::Geometry(format!(
                "patch {patch:?} does not fit extents {extents:?} on axis {a}"
            )));
        }
    }
    let axis_offsets = |a: usize| -> Vec<usize> {
        let stride = (patch[a] / 2).max(1);
        let last = extents[a] - patch[a];
        let mut offs: Vec<usize> = (0..=last).step_by(stride).collect();
        if *offs.last().unwrap() != last {
            offs.push(last);
        }
        offs
    };
    let (oh, ow, ol) = (axis_offsets(0), axis_offsets(1), axis_offsets(2));
    let mut out = Vec::with_capacity(oh.len() * ow.len() * ol.len());
    for &h in &oh {
        for &w in &ow {
            for &l in &ol {
                out.push([h, w, l]);
            }
        }
    }
    Ok(out)
}

/// Copies one patch out of a volume's voxel data (tensor index order).
pub fn extract_patch(
    values: &[f64],
    extents: [usize; 3],
    offset: [usize; 3],
    patch: [usize; 3],
) -> Vec<f64> {
    let [_, ew, el] = extents;
    let mut out = Vec::with_capacity(patch[0] * patch[1] * patch[2]);
    for h in 0..patch[0] {
        for w in 0..patch[1] {
            for l in 0..patch[2] {
                let i = ((offset[0] + h) * ew + offset[1] + w) * el + offset[2] + l;
                out.push(values[i]);
            }
        }
    }
    out
}

/// Separable Gaussian blending weights over a patch, with per-axis sigma
/// `extent/8` (floored so the weights never vanish).
pub fn blend_weights(patch: [usize; 3]) -> Vec<f64> {
    let axis = |e: usize| -> Vec<f64> {
        let sigma = (e as f64 / 8.0).max(1e-3);
        let c = (e as f64 - 1.0) / 2.0;
        (0..e)
            .map(|i| (-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma)).exp())
            .collect()
    };
    let (wh, ww, wl) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
    let mut out = Vec::with_capacity(patch[0] * patch[1] * patch[2]);
    for h in 0..patch[0] {
        for w in 0..patch[1] {
            for l in 0..patch[2] {
                out.push(wh[h] * ww[w] * wl[l]);
            }
        }
    }
    out
}

/// Synthesizes a whole volume from a normalized conditioning volume by
/// running Monte Carlo diffusion generation on overlapping patches and
/// blending them with Gaussian weights. Patches are processed in a fixed
/// order with per-patch generators derived from `seed`, so the result is a
/// pure function of (model, volume, settings, seed).
pub fn sliding_window_generate<P: NoisePredictor>(
    model: &P,
    cond: &Volume,
    patch: [usize; 3],
    steps: &ResampledSteps,
    runs: usize,
    seed: u64,
) -> Result<Volume> {
    if cond.space != IntensitySpace::Normalized {
        return Err(PipelineError::Geometry(
            "sliding-window generation expects a normalized conditioning volume".into(),
        ));
    }
    let ext = cond.extents;
    let offsets = window_offsets(ext, patch)?;
    let cvals = cond.to_f64();
    let weights = blend_weights(patch);
    let n = cvals.len();
    let mut acc = vec![0.0f64; n];
    let mut norm = vec![0.0f64; n];
    let [_, ew, el] = ext;
    for (wi, &off) in offsets.iter().enumerate() {
        let cpatch = extract_patch(&cvals, ext, off, patch);
        let ct = Tensor::constant(&[1, patch[0], patch[1], patch[2]], cpatch)
            .map_err(DiffusionError::from)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (wi as u64).wrapping_mul(0x9E3779B97F4A7C15));
        let gen = no_grad(|| generate(model, &ct, steps, runs, &mut rng))?;
        let gvals = gen.data();
        let mut pi = 0;
        for h in 0..patch[0] {
            for w in 0..patch[1] {
                for l in 0..patch[2] {
                    let i = ((off[0] + h) * ew + off[1] + w) * el + off[2] + l;
                    acc[i] += weights[pi] * gvals[pi];
                    norm[i] += weights[pi];
                    pi += 1;
                }
            }
        }
    }
    let values: Vec<f32> = acc
        .iter()
        .zip(&norm)
        .map(|(&a, &w)| (a / w) as f32)
        .collect();
    Ok(Volume::new(
        ext,
        cond.spacing,
        IntensitySpace::Normalized,
        values,
    )?)
}
