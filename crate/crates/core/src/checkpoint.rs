//! Checkpoint files: a JSON manifest of the architecture and tensor table,
//! followed by raw little-endian `f32` parameter data.
//!
//! ```text
//! magic  "MLGTCKPT"        8 bytes
//! version u32 LE
//! manifest_len u64 LE
//! manifest JSON            manifest_len bytes
//! tensor data              Σ numel · 4 bytes, in manifest order
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{ModelParams, ParamTree};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 8] = b"MLGTCKPT";
const VERSION: u32 = 1;

/// 32-byte SHA-256 of a checkpoint file.
pub type Fingerprint = [u8; 32];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub fold: Option<String>,
    pub split_seed: Option<u64>,
    pub steps: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
    pub fingerprint: Fingerprint,
}

pub fn fingerprint(bytes: &[u8]) -> Fingerprint {
    Sha256::digest(bytes).into()
}

pub fn fingerprint_hex(fp: &Fingerprint) -> String {
    fp.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_bytes<T: Real>(model: &Model<T>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    model.params.visit_named("", &mut |name, t| {
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec() })
    });
    let manifest = serde_json::to_vec(&Manifest { config: model.config.clone(), meta: meta.clone(), tensors })?;
    let mut out = Vec::with_capacity(20 + manifest.len() + 4 * model.params.count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for t in model.params.leaves() {
        for &v in t.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], offset: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = offset
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format { offset: *offset as u64, msg: format!("truncated while reading {what}") })?;
    let s = &bytes[*offset..end];
    *offset = end;
    Ok(s)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut off = 0;
    if take(bytes, &mut off, 8, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad checkpoint magic".into() });
    }
    let version = u32::from_le_bytes(take(bytes, &mut off, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format { offset: 8, msg: format!("unsupported checkpoint version {version}") });
    }
    let len = u64::from_le_bytes(take(bytes, &mut off, 8, "manifest length")?.try_into().unwrap());
    let manifest_at = off as u64;
    let manifest: Manifest = serde_json::from_slice(take(bytes, &mut off, len as usize, "manifest")?)
        .map_err(|e| Error::Format { offset: manifest_at, msg: format!("bad manifest: {e}") })?;

    let template = ModelParams::<Tensor<f32>>::init(&manifest.config, &mut ChaCha8Rng::seed_from_u64(0));
    let names = template.names();
    if names.len() != manifest.tensors.len() || names.iter().zip(&manifest.tensors).any(|(n, e)| n != &e.name) {
        return Err(Error::Format { offset: manifest_at, msg: "tensor table does not match the architecture".into() });
    }
    let mut loaded = Vec::with_capacity(names.len());
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let raw = take(bytes, &mut off, numel * 4, &entry.name)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        loaded.push(Tensor::new(entry.shape.clone(), data)?);
    }
    if off != bytes.len() {
        return Err(Error::Format { offset: off as u64, msg: "trailing bytes after tensor data".into() });
    }
    let mut it = loaded.into_iter();
    let params = template.map_named("", &mut |_, _| it.next().expect("count checked"));
    let model = Model::from_params(manifest.config, params)
        .map_err(|e| Error::Format { offset: manifest_at, msg: e.to_string() })?;
    Ok(Checkpoint { model, meta: manifest.meta, fingerprint: fingerprint(bytes) })
}

/// Writes the checkpoint and returns its fingerprint.
pub fn save<T: Real>(model: &Model<T>, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<Fingerprint> {
    let bytes = to_bytes(model, meta)?;
    std::fs::write(path, &bytes)?;
    Ok(fingerprint(&bytes))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}
