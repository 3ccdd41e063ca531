//! Versioned checkpoint container.
//!
//! Layout: `b"UMCK"`, `u32` version, `u64` header length, a JSON header naming
//! every tensor with its shape, dtype and offset, then little-endian `f32`
//! parameters followed by the two Adam moment buffers.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::DiffusionSchedule;
use crate::nn::{Adam, DenoiserConfig, TensorSpec};

const MAGIC: &[u8; 4] = b"UMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("bad header: {0}")]
    Header(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub schedule: DiffusionSchedule,
    pub params: Vec<f32>,
    /// Optimizer state including both moment buffers.
    pub adam: Adam,
    pub step: u64,
    /// Root of the per-step RNG streams; with `step` it fully determines the
    /// continuation.
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: DenoiserConfig,
    schedule: DiffusionSchedule,
    dtype: String,
    tensors: Vec<TensorSpec>,
    params: usize,
    adam: Adam,
    step: u64,
    seed: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            schedule: self.schedule,
            dtype: "f32".into(),
            tensors: self.config.tensors(),
            params: self.params.len(),
            adam: self.adam.clone(),
            step: self.step,
            seed: self.seed,
        };
        let json = serde_json::to_vec(&header).expect("plain data");
        let mut out = Vec::with_capacity(16 + json.len() + 12 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for buf in [&self.params, &self.adam.m, &self.adam.v] {
            for v in buf.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let need = |n: usize| {
            if bytes.len() < n {
                Err(CheckpointError::Truncated {
                    needed: n,
                    have: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(16)?;
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        need(16 + hlen)?;
        let header: Header = serde_json::from_slice(&bytes[16..16 + hlen])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.dtype != "f32" {
            return Err(CheckpointError::Header(format!("dtype {}", header.dtype)));
        }
        header
            .config
            .validate()
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.tensors != header.config.tensors() || header.params != header.config.param_count()
        {
            return Err(CheckpointError::Shape(
                "tensor table disagrees with config".into(),
            ));
        }
        let n = header.params;
        let body = &bytes[16 + hlen..];
        need(16 + hlen + 12 * n)?;
        let read = |i: usize| -> Vec<f32> {
            body[i * 4 * n..(i + 1) * 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        };
        let mut adam = header.adam;
        adam.m = read(1);
        adam.v = read(2);
        Ok(Self {
            config: header.config,
            schedule: header.schedule,
            params: read(0),
            adam,
            step: header.step,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and insists on the given architecture.
    pub fn load_expecting(path: &Path, config: &DenoiserConfig) -> Result<Self, CheckpointError> {
        let ck = Self::load(path)?;
        let (a, b) = (&ck.config, config);
        if a.tracks != b.tracks
            || a.seq_len != b.seq_len
            || a.token_embed_dim != b.token_embed_dim
            || a.summary_dim != b.summary_dim
            || a.conv_stride != b.conv_stride
            || a.n_layers != b.n_layers
            || a.n_heads != b.n_heads
        {
            return Err(CheckpointError::Shape(format!(
                "checkpoint has {} tracks x {} steps ({} params), expected {} tracks x {} steps ({} params)",
                a.tracks.len(),
                a.seq_len,
                a.param_count(),
                b.tracks.len(),
                b.seq_len,
                b.param_count()
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Model;
    use crate::tokens::{Layout, TokenSequence};
    use crate::train::Trainer;

    fn small(layout: Layout) -> DenoiserConfig {
        let mut c = DenoiserConfig::desk(layout);
        c.seq_len = 32;
        c.token_embed_dim = 8;
        c.summary_dim = 16;
        c.n_layers = 1;
        c.n_heads = 2;
        c.batch_size = 2;
        c
    }

    fn trained() -> Trainer {
        let mut t = Trainer::new(small(Layout::Melody), DiffusionSchedule::new(64), 3).unwrap();
        let data = vec![TokenSequence::silence(Layout::Melody, 32)];
        t.run(&data, 3, None).unwrap();
        t
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ck");
        t.checkpoint().save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, t.checkpoint());

        let x = TokenSequence::all_masked(Layout::Melody.kinds(), 32, 16);
        let m = Model::from_params(back.config, back.params).unwrap();
        assert_eq!(m.forward(&x).unwrap(), t.model.forward(&x).unwrap());
    }

    #[test]
    fn truncation_and_version_errors() {
        let bytes = trained().checkpoint().to_bytes();
        for cut in [3, 15, 40, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated { .. })
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&v2),
            Err(CheckpointError::Version { found: 2, .. })
        ));
        let mut junk = bytes;
        junk[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&junk), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn melody_checkpoint_rejects_trio_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ck");
        trained().checkpoint().save(&path).unwrap();
        assert!(matches!(
            Checkpoint::load_expecting(&path, &small(Layout::Trio)),
            Err(CheckpointError::Shape(_))
        ));
        assert!(Checkpoint::load_expecting(&path, &small(Layout::Melody)).is_ok());
    }
}
