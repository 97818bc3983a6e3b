//! Model checkpoints: named parameter tensors plus the resolved run
//! configuration, in a small binary container.
//!
//! Layout (little-endian): magic `VXDF\0`, version `u16`, configuration
//! text (`u32` length + UTF-8), parameter count `u32`, then per parameter:
//! name (`u32` length + UTF-8), rank `u8`, extents as `u32` each, and the
//! values as `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::model::SwinVnet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 5] = b"VXDF\0";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u16),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

/// An in-memory checkpoint: resolved configuration text and named
/// parameter records.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub params: Vec<ParamRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub extents: Vec<usize>,
    pub values: Vec<f32>,
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)
        .map_err(|_| CheckpointError::Corrupt("truncated string length".into()))?;
    let len = u32::from_le_bytes(b4) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| CheckpointError::Corrupt("truncated string payload".into()))?;
    String::from_utf8(buf).map_err(|_| CheckpointError::Corrupt("non-UTF-8 string".into()))
}

impl Checkpoint {
    /// Snapshots a model's parameters (converted to `f32` storage).
    pub fn from_model(model: &SwinVnet, config_text: String) -> Self {
        let mut params = Vec::new();
        let mut m = model.clone();
        m.visit_params(&mut |name, t| {
            params.push(ParamRecord {
                name,
                extents: t.shape().to_vec(),
                values: t.data().iter().map(|&v| v as f32).collect(),
            });
        });
        Checkpoint {
            config_text,
            params,
        }
    }

    /// Writes the named parameters back into a model, validating that the
    /// record names and extents line up with the model's traversal.
    pub fn apply_to(&self, model: &mut SwinVnet) -> Result<()> {
        let mut idx = 0;
        let mut err: Option<String> = None;
        model.visit_params(&mut |name, t| {
            if err.is_some() {
                return;
            }
            let Some(rec) = self.params.get(idx) else {
                err = Some(format!("missing record for parameter {name}"));
                return;
            };
            if rec.name != name {
                err = Some(format!("record {idx} is {}, expected {name}", rec.name));
                return;
            }
            if rec.extents != t.shape() {
                err = Some(format!(
                    "{name}: stored extents {:?} != model extents {:?}",
                    rec.extents,
                    t.shape()
                ));
                return;
            }
            let values: Vec<f64> = rec.values.iter().map(|&v| v as f64).collect();
            *t = Tensor::param(&rec.extents, values).expect("validated extents");
            idx += 1;
        });
        if let Some(e) = err {
            return Err(CheckpointError::Mismatch(e));
        }
        if idx != self.params.len() {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint has {} records, model consumed {idx}",
                self.params.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(&mut w, &self.config_text)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            write_str(&mut w, &p.name)?;
            if p.extents.len() > u8::MAX as usize {
                return Err(CheckpointError::Corrupt(format!(
                    "parameter {} has rank {}",
                    p.name,
                    p.extents.len()
                )));
            }
            w.write_all(&[p.extents.len() as u8])?;
            for &e in &p.extents {
                w.write_all(&(e as u32).to_le_bytes())?;
            }
            for &v in &p.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| CheckpointError::Corrupt("file shorter than the header".into()))?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let version = u16::from_le_bytes(b2);
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let config_text = read_str(&mut r)?;
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let mut b1 = [0u8; 1];
            r.read_exact(&mut b1)?;
            let rank = b1[0] as usize;
            let mut extents = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                r.read_exact(&mut b4)?;
                let e = u32::from_le_bytes(b4) as usize;
                numel = numel
                    .checked_mul(e)
                    .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: extent overflow")))?;
                extents.push(e);
            }
            let mut values = vec![0f32; numel];
            for v in &mut values {
                r.read_exact(&mut b4).map_err(|_| {
                    CheckpointError::Corrupt(format!("{name}: payload shorter than {numel}"))
                })?;
                *v = f32::from_le_bytes(b4);
            }
            params.push(ParamRecord {
                name,
                extents,
                values,
            });
        }
        if r.read(&mut b4)? != 0 {
            return Err(CheckpointError::Corrupt(
                "trailing bytes after the last record".into(),
            ));
        }
        Ok(Checkpoint {
            config_text,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SwinConfig;
    use tempfile::tempdir;

    fn toy_model(seed: u64) -> SwinVnet {
        SwinVnet::new(SwinConfig::toy(), seed).unwrap()
    }

    #[test]
    fn roundtrip_restores_forward_behavior() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.vxdf");
        let model = toy_model(3);
        Checkpoint::from_model(&model, "profile=toy\n".into())
            .save(&path)
            .unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.config_text, "profile=toy\n");
        let mut other = toy_model(99);
        ck.apply_to(&mut other).unwrap();

        let x = Tensor::constant(&[1, 8, 8, 4], vec![0.3; 256]).unwrap();
        let c = Tensor::constant(&[1, 8, 8, 4], vec![-0.2; 256]).unwrap();
        let (a, ka) = model.forward(&x, &c, 40).unwrap();
        let (b, kb) = other.forward(&x, &c, 40).unwrap();
        // f32 storage rounds parameters, so outputs agree only approximately
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-4, "{u} vs {v}");
        }
        for (u, v) in ka.data().iter().zip(kb.data()) {
            assert!((u - v).abs() < 1e-4);
        }
    }

    #[test]
    fn exact_roundtrip_of_records() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.vxdf");
        let ck = Checkpoint::from_model(&toy_model(1), "a=1\nb=two\n".into());
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut ck = Checkpoint::from_model(&toy_model(1), String::new());
        ck.params[0].extents[0] += 1;
        let extra = ck.params[0].values.len() / 2;
        ck.params[0].values.extend(vec![0.0; extra]);
        let mut model = toy_model(1);
        assert!(matches!(
            ck.apply_to(&mut model),
            Err(CheckpointError::Mismatch(_))
        ));
    }

    #[test]
    fn name_mismatch_rejected() {
        let mut ck = Checkpoint::from_model(&toy_model(1), String::new());
        ck.params[2].name = "wrong.name".into();
        let mut model = toy_model(1);
        assert!(matches!(
            ck.apply_to(&mut model),
            Err(CheckpointError::Mismatch(_))
        ));
    }

    #[test]
    fn record_count_mismatch_rejected() {
        let mut ck = Checkpoint::from_model(&toy_model(1), String::new());
        let extra = ck.params.last().unwrap().clone();
        ck.params.push(extra);
        let mut model = toy_model(1);
        assert!(matches!(
            ck.apply_to(&mut model),
            Err(CheckpointError::Mismatch(_))
        ));
    }

    #[test]
    fn corrupt_files_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.vxdf");
        Checkpoint::from_model(&toy_model(1), String::new())
            .save(&path)
            .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::Corrupt(_))
        ));
        std::fs::write(&path, b"JUNKFILE").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::BadMagic)
        ));
    }
}
