//! Binary tensor checkpoints.
//!
//! ```text
//! header  "SMCK" | version u32 | config hash [32] | step u64 | count u32
//! record  name_len u16 | name utf8 | dtype u8 (0 f32, 1 f64) | rank u8 | dims u32×rank | payload
//! ```
//!
//! All integers and payloads are little-endian, payloads row-major. Loading
//! parses the whole file before anything is applied.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SMCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

/// SHA-256 of a serialised configuration.
pub fn config_hash(serialized: &str) -> [u8; 32] {
    Sha256::digest(serialized.as_bytes()).into()
}

impl Checkpoint {
    /// Captures parameters (`param/<name>`) and, if given, optimizer moments
    /// (`adam.m/<name>`, `adam.v/<name>`, `adam.step`).
    pub fn capture(params: &ParamSet, opt: Option<&OptimizerState>, step: u64, config_hash: [u8; 32]) -> Self {
        let mut tensors: Vec<(String, Tensor)> =
            params.iter().map(|p| (format!("param/{}", p.name), p.value.clone())).collect();
        if let Some(o) = opt {
            for (p, m) in params.iter().zip(&o.m) {
                tensors.push((format!("adam.m/{}", p.name), m.clone()));
            }
            for (p, v) in params.iter().zip(&o.v) {
                tensors.push((format!("adam.v/{}", p.name), v.clone()));
            }
            tensors.push(("adam.step".into(), Tensor::scalar(o.step as f64)));
        }
        Self {
            config_hash,
            step,
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.config_hash);
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::Argument(format!("tensor name too long: {name}")))?;
            buf.extend_from_slice(&len.to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(1);
            buf.push(t.shape().len() as u8);
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > buf.len() {
                return Err(Error::Truncated(format!(
                    "checkpoint ends at byte {} but {} more bytes were expected at {pos}",
                    buf.len(),
                    n
                )));
            }
            let s = &buf[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(Error::IncompatibleCheckpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4"));
        if version != VERSION {
            return Err(Error::IncompatibleCheckpoint(format!("version {version}, expected {VERSION}")));
        }
        let config_hash: [u8; 32] = take(32)?.try_into().expect("32");
        let step = u64::from_le_bytes(take(8)?.try_into().expect("8"));
        let count = u32::from_le_bytes(take(4)?.try_into().expect("4"));
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nl = u16::from_le_bytes(take(2)?.try_into().expect("2")) as usize;
            let name = String::from_utf8(take(nl)?.to_vec())
                .map_err(|_| Error::IncompatibleCheckpoint("tensor name is not utf-8".into()))?;
            let dtype = take(1)?[0];
            let rank = take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize);
            }
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match dtype {
                0 => take(4 * n)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64)
                    .collect(),
                1 => take(8 * n)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                    .collect(),
                other => {
                    return Err(Error::IncompatibleCheckpoint(format!("`{name}` has unknown dtype code {other}")))
                }
            };
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::IncompatibleCheckpoint(format!("`{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if pos != buf.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{} trailing bytes after the last record",
                buf.len() - pos
            )));
        }
        Ok(Self {
            config_hash,
            step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Writes parameters (and optimizer state, when both sides have it) into
    /// `params`/`opt`. Every shape is checked first, then the config hash
    /// when `expected_hash` is given; nothing is modified on error.
    pub fn restore(&self, params: &mut ParamSet, opt: Option<&mut OptimizerState>, expected_hash: Option<&[u8; 32]>) -> Result<()> {
        let mut values = Vec::with_capacity(params.len());
        for p in params.iter() {
            let key = format!("param/{}", p.name);
            let t = self
                .get(&key)
                .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing tensor `{key}`")))?;
            if t.shape() != p.value.shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "`{}` has shape {:?} in the checkpoint but {:?} in the model",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            values.push(t.clone());
        }
        let mut moments = None;
        if let Some(o) = &opt {
            let mut m = Vec::with_capacity(params.len());
            let mut v = Vec::with_capacity(params.len());
            for p in params.iter() {
                for (prefix, out) in [("adam.m", &mut m), ("adam.v", &mut v)] {
                    let key = format!("{prefix}/{}", p.name);
                    let t = self
                        .get(&key)
                        .ok_or_else(|| Error::IncompatibleCheckpoint(format!("missing tensor `{key}`")))?;
                    if t.shape() != p.value.shape() {
                        return Err(Error::IncompatibleCheckpoint(format!(
                            "`{key}` has shape {:?}, parameter has {:?}",
                            t.shape(),
                            p.value.shape()
                        )));
                    }
                    out.push(t.clone());
                }
            }
            let step = self
                .get("adam.step")
                .ok_or_else(|| Error::IncompatibleCheckpoint("missing `adam.step`".into()))?
                .item() as u64;
            moments = Some((m, v, step, o.config));
        }
        if let Some(h) = expected_hash {
            if h != &self.config_hash {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "config hash {} does not match the current config {}",
                    hex::encode(self.config_hash),
                    hex::encode(h)
                )));
            }
        }
        for (p, v) in params.iter_mut().zip(values) {
            p.value = v;
        }
        if let (Some(o), Some((m, v, step, config))) = (opt, moments) {
            *o = OptimizerState { config, step, m, v };
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamWConfig;

    fn set(shape: &[usize]) -> ParamSet {
        let mut s = ParamSet::new();
        s.add("w", Tensor::filled(shape, 0.25));
        s.add("b", Tensor::new(vec![2], vec![1.0, -3.5]).unwrap());
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let params = set(&[2, 3]);
        let opt = OptimizerState::new(AdamWConfig::default(), &params);
        let ck = Checkpoint::capture(&params, Some(&opt), 7, [3; 32]);
        let a = dir.path().join("a.smck");
        ck.save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        assert_eq!(loaded, ck);
        let b = dir.path().join("b.smck");
        loaded.save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn mismatched_shape_is_named_and_nothing_applied() {
        let ck = Checkpoint::capture(&set(&[2, 3]), None, 1, [0; 32]);
        let mut other = set(&[3, 2]);
        other.get_mut(crate::params::ParamId(1)).value = Tensor::zeros(&[2]);
        let err = ck.restore(&mut other, None, None).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"), "{err}");
        assert_eq!(other.value(crate::params::ParamId(1)).data(), &[0.0, 0.0]);
    }

    #[test]
    fn hash_mismatch_is_incompatible() {
        let params = set(&[2, 2]);
        let ck = Checkpoint::capture(&params, None, 1, [1; 32]);
        let mut p = set(&[2, 2]);
        assert!(matches!(
            ck.restore(&mut p, None, Some(&[2; 32])),
            Err(Error::IncompatibleCheckpoint(_))
        ));
        ck.restore(&mut p, None, Some(&[1; 32])).unwrap();
    }

    #[test]
    fn truncated_file_is_reported() {
        let ck = Checkpoint::capture(&set(&[2, 2]), None, 1, [1; 32]);
        let bytes = ck.to_bytes().unwrap();
        for cut in [3, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Truncated(_))));
        }
    }
}
