//! Model checkpoints.
//!
//! ```text
//! 0..4    b"STCK"
//! 4..8    format version, u32 LE
//! 8..16   manifest length in bytes, u64 LE
//! 16..    UTF-8 JSON manifest
//! then    every parameter tensor as f32 LE, in manifest order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stvsr_core::params::Group;
use stvsr_core::pipeline::{ArchConfig, Model};

pub const MAGIC: &[u8; 4] = b"STCK";
pub const FORMAT_VERSION: u32 = 1;
/// Bumped whenever parameter naming or layout changes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint schema v{found} is incompatible with this build (schema v{expected}): {detail}")]
    Mismatch { found: u32, expected: u32, detail: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchManifest {
    pub channels: usize,
    pub guidance_width: usize,
    pub queries: usize,
    pub text_tokens: usize,
    pub guidance_heads: usize,
    pub n_k: usize,
    pub latent: usize,
    pub vel_width: usize,
    pub vel_blocks: usize,
    pub vel_heads: usize,
}

impl From<&ArchConfig> for ArchManifest {
    fn from(a: &ArchConfig) -> Self {
        Self {
            channels: a.channels,
            guidance_width: a.vrg.d,
            queries: a.vrg.queries,
            text_tokens: a.vrg.text_tokens,
            guidance_heads: a.vrg.heads,
            n_k: a.vrg.n_k,
            latent: a.vae.latent,
            vel_width: a.velocity.width,
            vel_blocks: a.velocity.blocks,
            vel_heads: a.velocity.heads,
        }
    }
}

impl ArchManifest {
    pub fn to_arch(&self) -> ArchConfig {
        let mut a = ArchConfig::standard(self.channels);
        a.vrg.d = self.guidance_width;
        a.vrg.queries = self.queries;
        a.vrg.text_tokens = self.text_tokens;
        a.vrg.heads = self.guidance_heads;
        a.vrg.n_k = self.n_k;
        a.vae.latent = self.latent;
        a.velocity.latent = self.latent;
        a.velocity.cond = self.guidance_width;
        a.velocity.width = self.vel_width;
        a.velocity.blocks = self.vel_blocks;
        a.velocity.heads = self.vel_heads;
        a
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub group: String,
    pub shape: Vec<usize>,
    /// Element offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub arch: ArchManifest,
    pub t_max: u32,
    pub timestep: u32,
    pub seed: u64,
    pub step: usize,
    pub params: Vec<ParamRecord>,
}

/// Everything needed to rebuild a model, plus its provenance.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model<f32>,
}

impl Checkpoint {
    pub fn new(model: Model<f32>, t_max: u32, timestep: u32, seed: u64, step: usize) -> Self {
        let mut offset = 0;
        let params = model
            .params
            .entries()
            .iter()
            .map(|e| {
                let r = ParamRecord { name: e.name.clone(), group: e.group.name().into(), shape: e.value.shape().to_vec(), offset };
                offset += e.value.len();
                r
            })
            .collect();
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            arch: ArchManifest::from(&model.arch),
            t_max,
            timestep,
            seed,
            step,
            params,
        };
        Self { manifest, model }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.manifest).expect("manifest serialises");
        let n: usize = self.model.params.entries().iter().map(|e| e.value.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in self.model.params.entries() {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::Format("missing STCK header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version, expected: FORMAT_VERSION });
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| CheckpointError::Format("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| CheckpointError::Format(format!("manifest: {e}")))?;
        let mismatch = |detail: String| CheckpointError::Mismatch { found: manifest.schema_version, expected: SCHEMA_VERSION, detail };
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(mismatch("schema version differs".into()));
        }
        let arch = manifest.arch.to_arch();
        let mut model = Model::<f32>::new(arch, 0).map_err(|e| mismatch(e.to_string()))?;
        let entries = model.params.entries().to_vec();
        if entries.len() != manifest.params.len() {
            return Err(mismatch(format!("{} parameter tensors, this build has {}", manifest.params.len(), entries.len())));
        }
        let payload = &bytes[16 + len..];
        let total: usize = entries.iter().map(|e| e.value.len()).sum();
        if payload.len() != 4 * total {
            return Err(CheckpointError::Format(format!("payload is {} bytes, expected {}", payload.len(), 4 * total)));
        }
        for (i, (e, r)) in entries.iter().zip(&manifest.params).enumerate() {
            if e.name != r.name || Group::parse(&r.group) != Some(e.group) || e.value.shape() != r.shape.as_slice() {
                return Err(mismatch(format!("parameter `{}` {:?} where this build expects `{}` {:?}", r.name, r.shape, e.name, e.value.shape())));
            }
            let raw = payload
                .get(4 * r.offset..4 * (r.offset + e.value.len()))
                .ok_or_else(|| CheckpointError::Format(format!("parameter `{}` lies outside the payload", r.name)))?;
            let dst = model.params.value_mut(i).data_mut();
            for (d, c) in dst.iter_mut().zip(raw.chunks_exact(4)) {
                *d = f32::from_le_bytes(c.try_into().unwrap());
            }
        }
        Ok(Self { manifest, model })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
        Self::from_bytes(&bytes)
    }

    /// Fails when this checkpoint cannot serve a pipeline built with `arch`.
    pub fn check_compatible(&self, arch: &ArchConfig) -> Result<(), CheckpointError> {
        let want = ArchManifest::from(arch);
        if want != self.manifest.arch {
            return Err(CheckpointError::Mismatch {
                found: self.manifest.schema_version,
                expected: SCHEMA_VERSION,
                detail: format!("checkpoint architecture {:?} differs from configured {:?}", self.manifest.arch, want),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Model<f32> {
        let mut a = ArchConfig::standard(1);
        a.velocity.width = 8;
        a.velocity.blocks = 1;
        a.velocity.heads = 2;
        Model::new(a, 5).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let ck = Checkpoint::new(small(), 1000, 799, 5, 3);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.manifest, ck.manifest);
        assert_eq!(back.model.params, ck.model.params);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn mismatches_are_versioned_errors() {
        let ck = Checkpoint::new(small(), 1000, 799, 5, 3);
        let mut bytes = ck.to_bytes();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Version { found: 9, .. })));
        let e = ck.check_compatible(&ArchConfig::standard(1)).unwrap_err();
        assert!(matches!(e, CheckpointError::Mismatch { found: 1, expected: 1, .. }));
        let mut m = ck.manifest.clone();
        m.schema_version = 0;
        let other = Checkpoint { manifest: m, model: ck.model.clone() };
        assert!(matches!(Checkpoint::from_bytes(&other.to_bytes()), Err(CheckpointError::Mismatch { found: 0, .. })));
    }
}
