//! Volumetric images: an in-memory representation, a small binary file
//! format, and the intensity normalizations used for training.
//!
//! File layout (little-endian): magic `VXVOL\0`, format version `u16`,
//! intensity-space tag `u8` (0 = raw attenuation units, 1 = normalized to
//! [-1, 1]), extents as three `u32`, voxel spacing as three `f32` (mm), then
//! `H*W*L` voxel values as `f32` in the same index order as the tensor
//! engine (`((h*W)+w)*L+l`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 6] = b"VXVOL\0";
const VERSION: u16 = 1;

/// Attenuation clipping bounds and the derived dynamic range.
pub const HU_MIN: f64 = -1024.0;
pub const HU_MAX: f64 = 1650.0;
pub const HU_RANGE: f64 = HU_MAX - HU_MIN; // 2674

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a volume file: bad magic {0:?}")]
    BadMagic([u8; 6]),
    #[error("unsupported volume format version {0}")]
    BadVersion(u16),
    #[error("corrupt volume file: {0}")]
    Corrupt(String),
    #[error("invalid volume: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, VolumeError>;

/// Which intensity scale the voxel values live on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntensitySpace {
    /// Raw attenuation values (CT) or scanner units (MR).
    Raw,
    /// Mapped to [-1, 1].
    Normalized,
}

/// A dense 3D scalar field with voxel spacing metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub extents: [usize; 3],
    /// Voxel spacing in millimetres per axis.
    pub spacing: [f32; 3],
    pub space: IntensitySpace,
    pub values: Vec<f32>,
}

impl Volume {
    pub fn new(
        extents: [usize; 3],
        spacing: [f32; 3],
        space: IntensitySpace,
        values: Vec<f32>,
    ) -> Result<Self> {
        let n = extents[0] * extents[1] * extents[2];
        if n == 0 {
            return Err(VolumeError::Invalid(format!(
                "zero-sized extents {extents:?}"
            )));
        }
        if values.len() != n {
            return Err(VolumeError::Invalid(format!(
                "extents {extents:?} need {n} voxels, got {}",
                values.len()
            )));
        }
        Ok(Volume {
            extents,
            spacing,
            space,
            values,
        })
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, l: usize) -> usize {
        (h * self.extents[1] + w) * self.extents[2] + l
    }

    #[inline]
    pub fn at(&self, h: usize, w: usize, l: usize) -> f32 {
        self.values[self.index(h, w, l)]
    }

    /// Voxel values as `f64` in tensor order.
    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[match self.space {
            IntensitySpace::Raw => 0u8,
            IntensitySpace::Normalized => 1u8,
        }])?;
        for &e in &self.extents {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &s in &self.spacing {
            w.write_all(&s.to_le_bytes())?;
        }
        for &v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)
            .map_err(|_| VolumeError::Corrupt("file shorter than the header".into()))?;
        if &magic != MAGIC {
            return Err(VolumeError::BadMagic(magic));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != VERSION {
            return Err(VolumeError::BadVersion(version));
        }
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        let space = match b1[0] {
            0 => IntensitySpace::Raw,
            1 => IntensitySpace::Normalized,
            t => {
                return Err(VolumeError::Corrupt(format!(
                    "unknown intensity-space tag {t}"
                )))
            }
        };
        let mut extents = [0usize; 3];
        for e in &mut extents {
            let mut b4 = [0u8; 4];
            r.read_exact(&mut b4)?;
            *e = u32::from_le_bytes(b4) as usize;
        }
        let n = extents[0]
            .checked_mul(extents[1])
            .and_then(|p| p.checked_mul(extents[2]))
            .ok_or_else(|| VolumeError::Corrupt(format!("extent overflow {extents:?}")))?;
        if n == 0 {
            return Err(VolumeError::Corrupt(format!("zero extents {extents:?}")));
        }
        let mut spacing = [0f32; 3];
        for s in &mut spacing {
            let mut b4 = [0u8; 4];
            r.read_exact(&mut b4)?;
            *s = f32::from_le_bytes(b4);
        }
        let mut values = vec![0f32; n];
        let mut b4 = [0u8; 4];
        for v in &mut values {
            r.read_exact(&mut b4)
                .map_err(|_| VolumeError::Corrupt(format!("payload shorter than {n} voxels")))?;
            *v = f32::from_le_bytes(b4);
        }
        if r.read(&mut b4)? != 0 {
            return Err(VolumeError::Corrupt("trailing bytes after payload".into()));
        }
        Volume::new(extents, spacing, space, values)
    }
}

/// Clips attenuation values to `[-1024, 1650]` and maps them affinely to
/// [-1, 1].
pub fn normalize_ct(v: &Volume) -> Result<Volume> {
    if v.space != IntensitySpace::Raw {
        return Err(VolumeError::Invalid(
            "attenuation normalization expects a raw-space volume".into(),
        ));
    }
    let values = v
        .values
        .iter()
        .map(|&x| {
            let c = (x as f64).clamp(HU_MIN, HU_MAX);
            (2.0 * (c - HU_MIN) / HU_RANGE - 1.0) as f32
        })
        .collect();
    Volume::new(v.extents, v.spacing, IntensitySpace::Normalized, values)
}

/// Inverse of [`normalize_ct`]: maps [-1, 1] back to attenuation units.
pub fn denormalize_ct(v: &Volume) -> Result<Volume> {
    if v.space != IntensitySpace::Normalized {
        return Err(VolumeError::Invalid(
            "denormalization expects a normalized volume".into(),
        ));
    }
    let values = v
        .values
        .iter()
        .map(|&x| ((x as f64 + 1.0) / 2.0 * HU_RANGE + HU_MIN) as f32)
        .collect();
    Volume::new(v.extents, v.spacing, IntensitySpace::Raw, values)
}

/// Min-max normalization to [-1, 1] for the conditioning modality, whose
/// intensity scale is scanner dependent. A constant volume maps to zeros.
pub fn normalize_minmax(v: &Volume) -> Result<Volume> {
    if v.space != IntensitySpace::Raw {
        return Err(VolumeError::Invalid(
            "min-max normalization expects a raw-space volume".into(),
        ));
    }
    let lo = v.values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = v.values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(VolumeError::Invalid("non-finite voxel values".into()));
    }
    let values = if hi > lo {
        v.values
            .iter()
            .map(|&x| 2.0 * (x - lo) / (hi - lo) - 1.0)
            .collect()
    } else {
        vec![0.0; v.numel()]
    };
    Volume::new(v.extents, v.spacing, IntensitySpace::Normalized, values)
}
