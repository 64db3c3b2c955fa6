//! Versioned binary encoding of [`ProbeParams`].
//!
//! `"PRB1"`, then little-endian `u32` version, `u32` L, H, projection dim,
//! MLP hidden dim, K, then every parameter group as `f64` in
//! [`ParamGroup::ALL`] order.

use std::path::Path;

use super::model::{ParamGroup, ProbeParams};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"PRB1";
const VERSION: u32 = 1;

impl ProbeParams {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 8 * self.num_params());
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            self.num_layers as u32,
            self.hidden_dim as u32,
            self.projection_dim as u32,
            self.mlp_hidden_dim as u32,
            self.num_classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for g in ParamGroup::ALL {
            for v in self.group(g) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 28 {
            return Err(Error::Corrupt {
                offset: bytes.len() as u64,
                reason: "probe blob shorter than its header".into(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad probe blob magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != VERSION {
            return Err(Error::Format(format!("unsupported probe blob version {}", word(0))));
        }
        let dims: Vec<usize> = (1..6).map(|i| word(i) as usize).collect();
        let mut params = ProbeParams::zeros(dims[0], dims[1], dims[2], dims[3], dims[4]);
        let expected = 28 + 8 * params.num_params();
        if bytes.len() != expected {
            return Err(Error::Corrupt {
                offset: bytes.len().min(expected) as u64,
                reason: format!("probe blob is {} bytes, expected {expected}", bytes.len()),
            });
        }
        let mut values = bytes[28..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for g in ParamGroup::ALL {
            for v in params.group_mut(g) {
                *v = values.next().unwrap();
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
