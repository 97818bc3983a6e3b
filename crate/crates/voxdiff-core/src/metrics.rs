//! Image-quality metrics between a synthesized and a reference volume:
//! mean absolute error, peak signal-to-noise ratio, multi-scale structural
//! similarity (computed per axial slice and averaged), and normalized
//! cross-correlation.

use thiserror::Error;

use crate::diffusion::INTENSITY_RANGE;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("metric inputs must share extents: {0:?} vs {1:?}")]
    ExtentMismatch([usize; 3], [usize; 3]),
    #[error("invalid metric input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn check_pair(a: &[f64], b: &[f64], ext: [usize; 3]) -> Result<()> {
    let n = ext[0] * ext[1] * ext[2];
    if a.len() != n || b.len() != n {
        return Err(MetricError::Invalid(format!(
            "extents {ext:?} need {n} voxels, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Mean absolute error, in the units of the inputs.
pub fn mae(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricError::Invalid(format!(
            "need equal nonempty inputs, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB over the attenuation dynamic range.
/// Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricError::Invalid(format!(
            "need equal nonempty inputs, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (INTENSITY_RANGE * INTENSITY_RANGE / mse).log10())
}

/// Pearson correlation between the two volumes (normalized
/// cross-correlation at zero lag). Constant inputs are rejected.
pub fn ncc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(MetricError::Invalid(format!(
            "need equal inputs of at least 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(MetricError::Invalid(
            "correlation undefined for a constant input".into(),
        ));
    }
    Ok(cov / (va * vb).sqrt())
}

/// 11-tap Gaussian window with sigma 1.5, normalized to unit sum.
fn ssim_window() -> [f64; 11] {
    let mut w = [0.0; 11];
    let sigma = 1.5f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Separable Gaussian filtering of a 2D field with symmetric boundary
/// handling (the window is renormalized over the in-bounds support).
fn filter2(img: &[f64], h: usize, w: usize, win: &[f64; 11]) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (k, &g) in win.iter().enumerate() {
                let cc = c as isize + k as isize - 5;
                if cc < 0 || cc >= w as isize {
                    continue;
                }
                acc += g * img[r * w + cc as usize];
                norm += g;
            }
            tmp[r * w + c] = acc / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (k, &g) in win.iter().enumerate() {
                let rr = r as isize + k as isize - 5;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                acc += g * tmp[rr as usize * w + c];
                norm += g;
            }
            out[r * w + c] = acc / norm;
        }
    }
    out
}

/// 2x2 mean-pooled downsampling (trailing odd row/column dropped).
fn downsample2(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (nh, nw) = (h / 2, w / 2);
    let mut out = vec![0.0; nh * nw];
    for r in 0..nh {
        for c in 0..nw {
            out[r * nw + c] = 0.25
                * (img[2 * r * w + 2 * c]
                    + img[2 * r * w + 2 * c + 1]
                    + img[(2 * r + 1) * w + 2 * c]
                    + img[(2 * r + 1) * w + 2 * c + 1]);
        }
    }
    (out, nh, nw)
}

/// Mean contrast-structure term and mean luminance-weighted SSIM of one
/// scale. Returns `(luminance_ssim_mean, contrast_structure_mean)`.
fn ssim_scale(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> (f64, f64) {
    let win = ssim_window();
    let c1 = (0.01 * range) * (0.01 * range);
    let c2 = (0.03 * range) * (0.03 * range);
    let mu_a = filter2(a, h, w, &win);
    let mu_b = filter2(b, h, w, &win);
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let s_aa = filter2(&aa, h, w, &win);
    let s_bb = filter2(&bb, h, w, &win);
    let s_ab = filter2(&ab, h, w, &win);
    let n = h * w;
    let (mut lum_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..n {
        let va = (s_aa[i] - mu_a[i] * mu_a[i]).max(0.0);
        let vb = (s_bb[i] - mu_b[i] * mu_b[i]).max(0.0);
        let cab = s_ab[i] - mu_a[i] * mu_b[i];
        let cs = (2.0 * cab + c2) / (va + vb + c2);
        let lum = (2.0 * mu_a[i] * mu_b[i] + c1) / (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1);
        cs_sum += cs;
        lum_sum += lum * cs;
    }
    (lum_sum / n as f64, cs_sum / n as f64)
}

/// Standard five-scale relative-weight exponents.
const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Multi-scale structural similarity of one 2D slice pair on a given
/// dynamic range. Scales that no longer fit the 11-tap window are dropped
/// and the remaining weights renormalized; the used scale count is returned.
pub fn ms_ssim_2d(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> Result<(f64, usize)> {
    if a.len() != h * w || b.len() != h * w || h == 0 || w == 0 {
        return Err(MetricError::Invalid(format!(
            "slice of {h}x{w} needs {} values, got {} and {}",
            h * w,
            a.len(),
            b.len()
        )));
    }
    let mut scales = 0;
    let (mut ca, mut cb) = (a.to_vec(), b.to_vec());
    let (mut ch, mut cw) = (h, w);
    let mut cs_terms = Vec::new();
    let mut lum_last = 1.0;
    for s in 0..5 {
        if ch < 11 || cw < 11 {
            break;
        }
        let (lum, cs) = ssim_scale(&ca, &cb, ch, cw, range);
        cs_terms.push(cs);
        lum_last = lum;
        scales = s + 1;
        if s < 4 {
            let (da, nh, nw) = downsample2(&ca, ch, cw);
            let (db, _, _) = downsample2(&cb, ch, cw);
            ca = da;
            cb = db;
            ch = nh;
            cw = nw;
        }
    }
    if scales == 0 {
        return Err(MetricError::Invalid(format!(
            "slice {h}x{w} smaller than the 11-tap analysis window"
        )));
    }
    let wsum: f64 = MS_WEIGHTS[..scales].iter().sum();
    let mut out = 1.0;
    for s in 0..scales {
        let weight = MS_WEIGHTS[s] / wsum;
        // the coarsest scale contributes the luminance-weighted term
        let term = if s == scales - 1 { lum_last } else { cs_terms[s] };
        out *= term.max(0.0).powf(weight);
    }
    Ok((out, scales))
}

/// Slice-wise multi-scale structural similarity of a volume pair: each
/// depth slice is scored in 2D and the scores averaged. Returns the mean
/// score and the scale count actually used (smaller slices use fewer).
pub fn ms_ssim_volume(
    a: &[f64],
    b: &[f64],
    ext: [usize; 3],
    range: f64,
) -> Result<(f64, usize)> {
    check_pair(a, b, ext)?;
    let [h, w, l] = ext;
    let mut sum = 0.0;
    let mut min_scales = usize::MAX;
    for slice in 0..l {
        let mut sa = Vec::with_capacity(h * w);
        let mut sb = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let i = (r * w + c) * l + slice;
                sa.push(a[i]);
                sb.push(b[i]);
            }
        }
        let (score, scales) = ms_ssim_2d(&sa, &sb, h, w, range)?;
        sum += score;
        min_scales = min_scales.min(scales);
    }
    Ok((sum / l as f64, min_scales))
}
