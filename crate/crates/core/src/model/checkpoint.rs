//! Binary checkpoint: magic, `u32` version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f64` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DraftModel, ModelConfig, TargetModel, Transformer};
use crate::error::{Error, Result};
use crate::nn::{Matrix, ParamStore};

const MAGIC: &[u8; 8] = b"EDACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// In `f64` values from the start of the data section.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub provenance: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn save(net: &Transformer, path: &Path, provenance: serde_json::Value) -> Result<()> {
    let mut offset = 0;
    let tensors = net
        .params()
        .iter()
        .map(|(_, name, m)| {
            let e = TensorEntry {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
                offset,
            };
            offset += m.len();
            e
        })
        .collect();
    let header = CheckpointHeader {
        config: net.config().clone(),
        provenance,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for (_, _, m) in net.params().iter() {
        for v in m.as_slice() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn load(path: &Path) -> Result<(CheckpointHeader, Transformer)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut read = |buf: &mut [u8]| {
        r.read_exact(buf)
            .map_err(|_| Error::Format(format!("{} is truncated", path.display())))
    };
    let mut magic = [0u8; 8];
    read(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    let mut word = [0u8; 4];
    read(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut long = [0u8; 8];
    read(&mut long)?;
    let header_len = u64::from_le_bytes(long) as usize;
    let mut json = vec![0u8; header_len];
    read(&mut json)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    let total: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
    let mut bytes = vec![0u8; total * 8];
    read(&mut bytes)?;
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let end = t.offset + t.rows * t.cols;
        let data = values
            .get(t.offset..end)
            .ok_or_else(|| Error::Format(format!("tensor {} lies outside the data section", t.name)))?;
        store.add(t.name.clone(), Matrix::from_vec(t.rows, t.cols, data.to_vec())?);
    }
    let net = Transformer::from_store(header.config.clone(), store)?;
    Ok((header, net))
}

pub fn save_target(model: &TargetModel, path: &Path, provenance: serde_json::Value) -> Result<()> {
    save(model.net(), path, provenance)
}

pub fn save_draft(model: &DraftModel, path: &Path, provenance: serde_json::Value) -> Result<()> {
    save(model.net(), path, provenance)
}

pub fn load_target(path: &Path) -> Result<(TargetModel, CheckpointHeader)> {
    let (h, net) = load(path)?;
    Ok((TargetModel::from_transformer(net)?, h))
}

pub fn load_draft(path: &Path) -> Result<(DraftModel, CheckpointHeader)> {
    let (h, net) = load(path)?;
    Ok((DraftModel::from_transformer(net)?, h))
}
