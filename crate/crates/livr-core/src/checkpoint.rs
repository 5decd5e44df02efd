//! Checkpoint container.
//!
//! One file: an 8-byte magic, a little-endian u64 manifest length, a JSON
//! manifest (model config, vocabulary, and per-parameter shape/offset
//! records), then the raw little-endian f64 buffers concatenated in manifest
//! order. Buffers round-trip bitwise. A checkpoint whose vocabulary
//! disagrees with the runtime vocabulary fails at load time.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Params};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

const MAGIC: &[u8; 8] = b"TINYCKP1";

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    path: String,
    shape: Vec<usize>,
    /// Offset in f64 elements from the start of the payload.
    offset: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    vocab: Vocabulary,
    config_hash: String,
    params: Vec<ParamRecord>,
}

/// Write a checkpoint for `params` under the given config/vocab.
pub fn save(
    path: &Path,
    config: &ModelConfig,
    vocab: &Vocabulary,
    params: &Params,
    config_hash: &str,
) -> Result<()> {
    let mut records = Vec::new();
    let mut offset = 0usize;
    for (name, t) in params {
        records.push(ParamRecord {
            path: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            count: t.numel(),
        });
        offset += t.numel();
    }
    let manifest = Manifest {
        config: config.clone(),
        vocab: vocab.clone(),
        config_hash: config_hash.to_string(),
        params: records,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for t in params.values() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct Loaded {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub config_hash: String,
    pub params: Params,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("{}: not a checkpoint file", path.display())));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let total: usize = manifest.params.iter().map(|p| p.count).sum();
    if payload.len() != total * 8 {
        return Err(Error::Data(format!(
            "checkpoint payload is {} bytes, manifest implies {}",
            payload.len(),
            total * 8
        )));
    }

    let mut params = Params::new();
    for rec in &manifest.params {
        if rec.shape.iter().product::<usize>() != rec.count {
            return Err(Error::Data(format!("param {}: shape/count mismatch", rec.path)));
        }
        let start = rec.offset * 8;
        let data: Vec<f64> = payload[start..start + rec.count * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.insert(rec.path.clone(), Tensor::new(rec.shape.clone(), data)?);
    }
    Ok(Loaded {
        config: manifest.config,
        vocab: manifest.vocab,
        config_hash: manifest.config_hash,
        params,
    })
}

/// Rebuild a model from a checkpoint, re-deriving everything that is not
/// stored (position table, trainability flags).
pub fn load_model(path: &Path) -> Result<Model> {
    let loaded = load(path)?;
    let mut model = crate::model::init_model(&loaded.config, 0)?;
    if model.vocab != loaded.vocab {
        return Err(Error::Data(
            "checkpoint vocabulary does not match the runtime vocabulary".into(),
        ));
    }
    let expected: Vec<&String> = model.params.keys().collect();
    let got: Vec<&String> = loaded.params.keys().collect();
    if expected != got {
        return Err(Error::Data("checkpoint parameter set does not match the config".into()));
    }
    for (path, tensor) in loaded.params {
        let slot = model.params.get_mut(&path).unwrap();
        if slot.shape() != tensor.shape() {
            return Err(Error::Data(format!("param {path}: shape mismatch")));
        }
        let grad = slot.requires_grad;
        *slot = tensor;
        slot.requires_grad = grad;
    }
    Ok(model)
}
