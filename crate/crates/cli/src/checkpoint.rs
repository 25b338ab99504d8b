//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `RIMCKPT1`, the manifest length as a
//! little-endian `u64`, the manifest as compact JSON, then every parameter
//! as little-endian `f32` in manifest order.

use std::fs;
use std::io::Write;
use std::path::Path;

use rim_core::models::{RimConfig, RimParams};
use rim_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

const MAGIC: &[u8; 8] = b"RIMCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Offset into the payload in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: RimConfig,
    pub params: Vec<ParamEntry>,
    /// Optimiser updates applied.
    pub step: usize,
    /// Rollout length used in training.
    pub rollout_steps: usize,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: RimParams<f32>,
    pub step: usize,
    pub rollout_steps: usize,
}

/// SHA-256 of the compact JSON form of `config`, hex encoded.
pub fn config_hash(config: &RimConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

fn bad(path: &Path, message: impl Into<String>) -> CliError {
    CliError::Checkpoint { path: path.to_path_buf(), message: message.into() }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = &self.params.config;
        let mut offset = 0;
        let mut params = Vec::new();
        for (name, t) in self.params.named() {
            params.push(ParamEntry { name: name.to_string(), shape: t.shape().to_vec(), dtype: "f32".into(), offset });
            offset += t.len();
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            params,
            step: self.step,
            rollout_steps: self.rollout_steps,
            config_hash: config_hash(config),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.named() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> CliResult<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad(path, "not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad(path, "truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(path, format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(bad(path, format!("unsupported format version {}", manifest.format_version)));
        }
        if manifest.config_hash != config_hash(&manifest.config) {
            return Err(bad(path, "config hash does not match the stored configuration"));
        }
        let payload = &bytes[16 + len..];
        let mut named = Vec::with_capacity(manifest.params.len());
        let mut expected_offset = 0;
        for p in &manifest.params {
            if p.dtype != "f32" {
                return Err(bad(path, format!("{}: unsupported dtype {}", p.name, p.dtype)));
            }
            if p.offset != expected_offset {
                return Err(bad(path, format!("{}: offset {} out of sequence", p.name, p.offset)));
            }
            let n: usize = p.shape.iter().product();
            let raw = payload
                .get(4 * p.offset..4 * (p.offset + n))
                .ok_or_else(|| bad(path, format!("{}: truncated payload", p.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            named.push((p.name.clone(), Tensor::new(p.shape.clone(), data).map_err(|e| bad(path, e.to_string()))?));
            expected_offset += n;
        }
        if payload.len() != 4 * expected_offset {
            return Err(bad(path, "trailing bytes after payload"));
        }
        let params = RimParams::from_named(&manifest.config, named).map_err(|e| bad(path, e.to_string()))?;
        Ok(Checkpoint { params, step: manifest.step, rollout_steps: manifest.rollout_steps })
    }

    /// Writes to a temporary sibling, syncs, then renames over `path`.
    pub fn save(&self, path: &Path) -> CliResult<()> {
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let name = path.file_name().ok_or_else(|| bad(path, "not a file path"))?;
        let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            CliError::io(path, e)
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and checks that the stored architecture equals `expected`.
    pub fn load_for(path: &Path, expected: &RimConfig) -> CliResult<Self> {
        let ck = Self::load(path)?;
        if config_hash(&ck.params.config) != config_hash(expected) {
            return Err(bad(path, "architecture differs from the requested configuration"));
        }
        Ok(ck)
    }
}
