//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "NDFP" | version: u16 | config_len: u32 | config text
//! | tensor_count: u32
//! | per tensor: name_len: u32 | name | rank: u32 | extents: u64 * rank | values: f64 * prod(extents)
//! | crc32 of every preceding byte: u32
//! ```

use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::ModelError;

use super::config::{ConfigError, TrainConfig};
use super::model::SessionModel;

pub const MAGIC: &[u8; 4] = b"NDFP";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u16 },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Named tensors plus the config that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub tensors: Vec<(String, Tensor)>,
}

/// Tensors whose names end with this suffix are fixed (not trained).
const FIXED_SUFFIX: &str = ".features";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated {
                offset: self.bytes.len(),
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

impl Checkpoint {
    pub fn from_model(model: &SessionModel) -> Self {
        Self {
            config: model.config.clone(),
            tensors: model
                .store
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<SessionModel, CheckpointError> {
        let mut store = ParamStore::new();
        for (name, t) in self.tensors {
            if name.ends_with(FIXED_SUFFIX) {
                store.add_fixed(name, t);
            } else {
                store.add(name, t);
            }
        }
        Ok(SessionModel::from_store(self.config, store)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_text();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Checks magic and version, walks the records (reporting truncation),
    /// then verifies the checksum before interpreting anything.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let cfg_len = r.u32()? as usize;
        let cfg_bytes = r.take(cfg_len)?;
        let count = r.u32()? as usize;
        let mut raw = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.take(name_len)?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::new();
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .and_then(|n| n.checked_mul(8))
                .ok_or(CheckpointError::Truncated {
                    offset: bytes.len(),
                })?;
            raw.push((name, shape, r.take(n)?));
        }
        let body_end = r.pos;
        let stored = r.u32()?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }

        let cfg_text = std::str::from_utf8(cfg_bytes)
            .map_err(|_| CheckpointError::Malformed("config is not UTF-8".into()))?;
        let config = TrainConfig::parse(cfg_text)?;
        let mut tensors = Vec::with_capacity(count);
        for (name, shape, data) in raw {
            let name = String::from_utf8(name.to_vec())
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
            let values = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, values)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: TrainConfig::default(),
            tensors: vec![
                (
                    "a".into(),
                    Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
                ),
                ("ndf.tree0.features".into(), Tensor::vector(vec![0.0, 3.0])),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.config, c.config);
        for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(&c.tensors) {
            assert_eq!(n1, n2);
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        let at = flipped.len() - 20;
        flipped[at] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped),
            Err(CheckpointError::Checksum { .. })
        ));

        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&version),
            Err(CheckpointError::Version { found: 9 })
        ));

        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 9]),
            Err(CheckpointError::Truncated { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"PNG!"),
            Err(CheckpointError::BadMagic)
        ));
    }
}
