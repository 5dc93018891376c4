//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic `UVACKPT1`, a little-endian u32 length prefix, a
//! UTF-8 JSON manifest (configs, step, optimizer step counters, and the
//! tensor directory with byte offsets), then the raw little-endian f32
//! tensor payloads in directory order: model arena tensors first, then the
//! four optimizer moment buffers.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UvaError};
use crate::nn::{build_architecture, ArchitectureConfig, ModelParams};
use crate::train::{AdamState, TrainConfig, Trainer};

const MAGIC: &[u8; 8] = b"UVACKPT1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload section.
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    arch: ArchitectureConfig,
    train: TrainConfig,
    step: u64,
    adam_t_e: u64,
    adam_t_g: u64,
    tensors: Vec<ManifestTensor>,
}

/// Everything needed to resume or serve a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch_cfg: ArchitectureConfig,
    pub train_cfg: TrainConfig,
    pub step: u64,
    pub params: ModelParams<f32>,
    pub opt_e: AdamState<f32>,
    pub opt_g: AdamState<f32>,
}

impl Checkpoint {
    pub fn from_trainer(
        acfg: &ArchitectureConfig,
        tcfg: &TrainConfig,
        step: u64,
        trainer: &Trainer,
    ) -> Self {
        Checkpoint {
            arch_cfg: acfg.clone(),
            train_cfg: tcfg.clone(),
            step,
            params: trainer.params.clone(),
            opt_e: trainer.opt_e.clone(),
            opt_g: trainer.opt_g.clone(),
        }
    }

    pub fn into_trainer(self) -> Trainer {
        Trainer {
            params: self.params,
            opt_e: self.opt_e,
            opt_g: self.opt_g,
        }
    }

    fn manifest(&self) -> Manifest {
        let arch = self.params.arch();
        let enc_len = arch.encoder_len() as u64;
        let gen_len = (self.params.data().len() - arch.encoder_len()) as u64;
        let mut tensors: Vec<ManifestTensor> = arch
            .tensors()
            .iter()
            .map(|m| ManifestTensor {
                name: m.name.clone(),
                shape: m.shape.clone(),
                offset: m.offset as u64 * 4,
            })
            .collect();
        let mut cursor = self.params.data().len() as u64 * 4;
        for (name, len) in [
            ("adam_e.m", enc_len),
            ("adam_e.v", enc_len),
            ("adam_g.m", gen_len),
            ("adam_g.v", gen_len),
        ] {
            tensors.push(ManifestTensor {
                name: name.into(),
                shape: vec![len as usize],
                offset: cursor,
            });
            cursor += len * 4;
        }
        Manifest {
            version: VERSION,
            arch: self.arch_cfg.clone(),
            train: self.train_cfg.clone(),
            step: self.step,
            adam_t_e: self.opt_e.t,
            adam_t_g: self.opt_g.t,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_string(&self.manifest()).expect("manifest serializes");
        let payload_len = (self.params.data().len() + 2 * self.opt_e.m.len() + 2 * self.opt_g.m.len()) * 4;
        let mut out = Vec::with_capacity(12 + manifest.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for buf in [
            self.params.data(),
            &self.opt_e.m,
            &self.opt_e.v,
            &self.opt_g.m,
            &self.opt_g.v,
        ] {
            for v in buf {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(UvaError::CorruptCheckpoint("file shorter than header".into()));
        }
        if &bytes[..7] != &MAGIC[..7] {
            return Err(UvaError::CorruptCheckpoint("bad magic".into()));
        }
        if bytes[7] != MAGIC[7] {
            return Err(UvaError::UnsupportedVersion(format!(
                "container '{}'",
                String::from_utf8_lossy(&bytes[..8])
            )));
        }
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + mlen {
            return Err(UvaError::CorruptCheckpoint("truncated manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[12..12 + mlen])
            .map_err(|e| UvaError::CorruptCheckpoint(format!("manifest: {e}")))?;
        if manifest.version != VERSION {
            return Err(UvaError::UnsupportedVersion(format!(
                "manifest version {}",
                manifest.version
            )));
        }
        let arch = Arc::new(build_architecture(&manifest.arch)?);
        let enc_len = arch.encoder_len();
        let total = arch.param_count();
        let gen_len = total - enc_len;

        // The directory must match the architecture exactly.
        let expected = arch.tensors().len() + 4;
        if manifest.tensors.len() != expected {
            return Err(UvaError::CorruptCheckpoint(format!(
                "directory has {} tensors, expected {expected}",
                manifest.tensors.len()
            )));
        }
        for (meta, entry) in arch.tensors().iter().zip(&manifest.tensors) {
            if meta.name != entry.name
                || meta.shape != entry.shape
                || meta.offset as u64 * 4 != entry.offset
            {
                return Err(UvaError::CorruptCheckpoint(format!(
                    "directory entry {} does not match the architecture",
                    entry.name
                )));
            }
        }

        let payload = &bytes[12 + mlen..];
        let expect_floats = total + 2 * enc_len + 2 * gen_len;
        if payload.len() != expect_floats * 4 {
            return Err(UvaError::CorruptCheckpoint(format!(
                "payload is {} bytes, expected {}",
                payload.len(),
                expect_floats * 4
            )));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()));
        let mut take = |n: usize| -> Vec<f32> { floats.by_ref().take(n).collect() };
        let params = ModelParams::from_flat(&arch, take(total))?;
        let opt_e = AdamState {
            m: take(enc_len),
            v: take(enc_len),
            t: manifest.adam_t_e,
        };
        let opt_g = AdamState {
            m: take(gen_len),
            v: take(gen_len),
            t: manifest.adam_t_g,
        };
        Ok(Checkpoint {
            arch_cfg: manifest.arch,
            train_cfg: manifest.train,
            step: manifest.step,
            params,
            opt_e,
            opt_g,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| UvaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| UvaError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
