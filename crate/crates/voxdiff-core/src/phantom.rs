//! Synthetic paired phantoms: a shared anatomy field rendered once with
//! MR-like contrast and once with CT-like attenuation, so the two volumes
//! depict the same structures under different intensity mappings.
//!
//! The anatomy is a sum of random Gaussian bumps inside an ellipsoidal body
//! mask. Thresholding the field yields air / soft-tissue / bone classes;
//! each class gets modality-specific intensities plus smooth variation, and
//! both volumes are lightly blurred to soften class boundaries.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::volume::{IntensitySpace, Result, Volume, HU_MAX, HU_MIN};

/// Controls for the random phantom generator.
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    pub spacing: [f32; 3],
    /// Number of Gaussian anatomy bumps.
    pub bumps: usize,
    /// Standard deviation of the additive intensity noise, in class units.
    pub noise: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extents: [32, 32, 8],
            spacing: [1.0, 1.0, 2.5],
            bumps: 6,
            noise: 0.01,
        }
    }
}

/// CT attenuation assigned to each tissue class.
const CT_AIR: f64 = -1000.0;
const CT_SOFT: f64 = 40.0;
const CT_BONE: f64 = 700.0;

/// MR intensity assigned to each tissue class (arbitrary scanner units).
const MR_AIR: f64 = 15.0;
const MR_SOFT: f64 = 420.0;
const MR_BONE: f64 = 70.0;

struct Bump {
    center: [f64; 3],
    sigma: [f64; 3],
    amp: f64,
}

/// Separable 3-tap blur with weights (0.25, 0.5, 0.25) per axis, clamped at
/// the boundary.
fn blur3(values: &mut Vec<f64>, ext: [usize; 3]) {
    let [eh, ew, el] = ext;
    let idx = |h: usize, w: usize, l: usize| (h * ew + w) * el + l;
    for axis in 0..3 {
        let mut out = values.clone();
        for h in 0..eh {
            for w in 0..ew {
                for l in 0..el {
                    let (mut lo, mut hi) = ((h, w, l), (h, w, l));
                    match axis {
                        0 => {
                            lo.0 = h.saturating_sub(1);
                            hi.0 = (h + 1).min(eh - 1);
                        }
                        1 => {
                            lo.1 = w.saturating_sub(1);
                            hi.1 = (w + 1).min(ew - 1);
                        }
                        _ => {
                            lo.2 = l.saturating_sub(1);
                            hi.2 = (l + 1).min(el - 1);
                        }
                    }
                    out[idx(h, w, l)] = 0.25 * values[idx(lo.0, lo.1, lo.2)]
                        + 0.5 * values[idx(h, w, l)]
                        + 0.25 * values[idx(hi.0, hi.1, hi.2)];
                }
            }
        }
        *values = out;
    }
}

/// Draws one MR/CT phantom pair in raw intensity spaces.
pub fn synthesize_pair(spec: &PhantomSpec, seed: u64) -> Result<(Volume, Volume)> {
    let [eh, ew, el] = spec.extents;
    let n = eh * ew * el;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let bumps: Vec<Bump> = (0..spec.bumps)
        .map(|_| Bump {
            center: [
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
            ],
            sigma: [
                rng.gen_range(0.08..0.25),
                rng.gen_range(0.08..0.25),
                rng.gen_range(0.15..0.4),
            ],
            amp: rng.gen_range(0.5..1.0),
        })
        .collect();

    // anatomy field in [0, ~bumps], masked by an ellipsoidal body outline
    let mut anatomy = vec![0.0f64; n];
    let mut body = vec![false; n];
    for h in 0..eh {
        for w in 0..ew {
            for l in 0..el {
                let u = [
                    (h as f64 + 0.5) / eh as f64,
                    (w as f64 + 0.5) / ew as f64,
                    (l as f64 + 0.5) / el as f64,
                ];
                // volumes mimic scans cropped tightly to the anatomy, so the
                // body fills most of the grid with a thin air margin
                let r2 = ((u[0] - 0.5) / 0.62).powi(2)
                    + ((u[1] - 0.5) / 0.62).powi(2)
                    + ((u[2] - 0.5) / 0.66).powi(2);
                let i = (h * ew + w) * el + l;
                if r2 > 1.0 {
                    continue;
                }
                body[i] = true;
                let mut a = 0.0;
                for b in &bumps {
                    let d2 = ((u[0] - b.center[0]) / b.sigma[0]).powi(2)
                        + ((u[1] - b.center[1]) / b.sigma[1]).powi(2)
                        + ((u[2] - b.center[2]) / b.sigma[2]).powi(2);
                    a += b.amp * (-0.5 * d2).exp();
                }
                anatomy[i] = a;
            }
        }
    }
    let peak = anatomy.iter().cloned().fold(0.0f64, f64::max).max(1e-9);

    // class thresholds on the normalized anatomy: bone where the field is
    // strong, soft tissue inside the body, air elsewhere
    let mut ct = vec![CT_AIR; n];
    let mut mr = vec![MR_AIR; n];
    for i in 0..n {
        if !body[i] {
            continue;
        }
        let a = anatomy[i] / peak;
        let (c, m) = if a > 0.75 {
            (CT_BONE, MR_BONE)
        } else {
            (CT_SOFT, MR_SOFT)
        };
        // smooth within-class variation driven by the same anatomy value,
        // so the two modalities stay structurally aligned
        let wiggle = 60.0 * (a * 7.0).sin();
        ct[i] = c + wiggle;
        mr[i] = m + 0.6 * wiggle;
    }

    blur3(&mut ct, spec.extents);
    blur3(&mut mr, spec.extents);

    if spec.noise > 0.0 {
        for i in 0..n {
            ct[i] += rng.gen_range(-1.0..1.0) * spec.noise * 100.0;
            mr[i] += rng.gen_range(-1.0..1.0) * spec.noise * 50.0;
        }
    }

    let ct_vals: Vec<f32> = ct
        .iter()
        .map(|&v| v.clamp(HU_MIN, HU_MAX) as f32)
        .collect();
    let mr_vals: Vec<f32> = mr.iter().map(|&v| v.max(0.0) as f32).collect();
    Ok((
        Volume::new(spec.extents, spec.spacing, IntensitySpace::Raw, mr_vals)?,
        Volume::new(spec.extents, spec.spacing, IntensitySpace::Raw, ct_vals)?,
    ))
}
