//! Checkpoints and instance datasets.
//!
//! A checkpoint is one JSON document: a header with the model configuration
//! and format version, then every parameter by name with its shape and a
//! base64 payload of little-endian `f64` values. Datasets are JSON lines, one
//! instance per line.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::diffnum::{Array, ParamStore};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::problems::ProblemInstance;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: [usize; 2],
    data: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: ModelConfig,
    #[serde(default)]
    epoch: usize,
    params: Vec<ParamRecord>,
}

fn encode_f64s(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f64s(s: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::Format(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("payload is not a whole number of f64".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Serialises `model` together with the epoch it was saved at.
pub fn checkpoint_to_json(model: &Model, epoch: usize) -> Result<String> {
    let params = model
        .params
        .iter()
        .map(|(_, name, a)| ParamRecord {
            name: name.to_string(),
            shape: a.shape(),
            data: encode_f64s(a.data()),
        })
        .collect();
    let ck = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        epoch,
        params,
    };
    Ok(serde_json::to_string_pretty(&ck)?)
}

/// Inverse of [`checkpoint_to_json`]; returns the model and its epoch.
pub fn checkpoint_from_json(s: &str) -> Result<(Model, usize)> {
    let ck: Checkpoint = serde_json::from_str(s)?;
    if ck.format_version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format_version {}",
            ck.format_version
        )));
    }
    let mut store = ParamStore::new();
    for p in ck.params {
        let data = decode_f64s(&p.data)?;
        store.insert(p.name, Array::new(p.shape[0], p.shape[1], data)?);
    }
    Ok((Model::from_params(ck.config, store)?, ck.epoch))
}

pub fn dataset_to_jsonl(instances: &[ProblemInstance]) -> Result<String> {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&inst.to_json()?);
        out.push('\n');
    }
    Ok(out)
}

pub fn dataset_from_jsonl(s: &str) -> Result<Vec<ProblemInstance>> {
    s.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            ProblemInstance::from_json(l)
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))
        })
        .collect()
}
