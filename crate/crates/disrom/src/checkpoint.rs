//! Model checkpoint container.
//!
//! ```text
//! DISCKPT1\n
//! {"spec":{...},"seed":S,"pruned":[...],"params":[{"name":..,"shape":[..]},...]}\n
//! parameters as little-endian f32, concatenated in manifest order
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use disrom_core::models::{Model, ModelError, ModelSpec};
use disrom_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8] = b"DISCKPT1\n";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint payload holds {actual} bytes, manifest declares {expected}")]
    Payload { expected: usize, actual: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    seed: u64,
    pruned: Vec<usize>,
    params: Vec<ParamEntry>,
}

pub fn encode(model: &Model<f32>) -> Vec<u8> {
    let params = model.params();
    let header = Header {
        spec: model.spec.clone(),
        seed: model.seed,
        pruned: model.pruned().iter().copied().collect(),
        params: model
            .param_names()
            .into_iter()
            .zip(&params)
            .map(|(name, p)| ParamEntry { name, shape: p.shape().to_vec() })
            .collect(),
    };
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(serde_json::to_string(&header).expect("plain data").as_bytes());
    out.push(b'\n');
    for p in params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Model<f32>, CheckpointError> {
    let rest = bytes.strip_prefix(MAGIC).ok_or(CheckpointError::BadMagic)?;
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| CheckpointError::Header("no header line".into()))?;
    let header: Header = serde_json::from_slice(&rest[..nl]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &rest[nl + 1..];
    let expected: usize = header.params.iter().map(|p| 4 * p.shape.iter().product::<usize>()).sum();
    if payload.len() != expected {
        return Err(CheckpointError::Payload { expected, actual: payload.len() });
    }
    let mut model = Model::<f32>::build(&header.spec, header.seed)?;
    let mut offset = 0;
    let mut values = Vec::with_capacity(header.params.len());
    for entry in header.params {
        let n: usize = entry.shape.iter().product();
        let data = payload[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        offset += 4 * n;
        let t = Tensor::new(&entry.shape, data).map_err(ModelError::from)?;
        values.push((entry.name, t));
    }
    model.load_params(&values, &header.pruned)?;
    Ok(model)
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<(), CheckpointError> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    f.write_all(&encode(model))?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model<f32>, CheckpointError> {
    decode(&fs::read(path)?)
}
