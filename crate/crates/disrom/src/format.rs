//! `DISROM1` dataset container.
//!
//! Layout (see `docs/format.md`):
//!
//! ```text
//! DISROM1\n
//! {"shape":[T,c,h,w],"channels":[...],"normalization":{...},"split":S}\n
//! T·c·h·w little-endian f32 values, row-major
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use disrom_core::data::{Dataset, NormalizationRecord};
use disrom_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8] = b"DISROM1\n";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("not a DISROM1 file (bad magic)")]
    BadMagic,
    #[error("malformed header: {0}")]
    Header(String),
    #[error("payload shorter than manifest: {actual} bytes present, {expected} declared")]
    Truncated { expected: usize, actual: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    shape: [usize; 4],
    channels: Vec<String>,
    normalization: NormalizationRecord,
    split: usize,
}

/// Serializes `dataset` into container bytes.
pub fn encode(dataset: &Dataset) -> Vec<u8> {
    let shape = dataset.snapshots.shape();
    let header = Header {
        shape: [shape[0], shape[1], shape[2], shape[3]],
        channels: dataset.channel_names.clone(),
        normalization: dataset.normalization.clone(),
        split: dataset.split,
    };
    let json = serde_json::to_string(&header).expect("header is plain data");
    let mut out = Vec::with_capacity(MAGIC.len() + json.len() + 1 + 4 * dataset.snapshots.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    for v in dataset.snapshots.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Dataset, FormatError> {
    let rest = bytes.strip_prefix(MAGIC).ok_or(FormatError::BadMagic)?;
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| FormatError::Header("no header line".into()))?;
    let header: Header = serde_json::from_slice(&rest[..nl]).map_err(|e| FormatError::Header(e.to_string()))?;
    let payload = &rest[nl + 1..];

    let [t, c, h, w] = header.shape;
    if header.channels.len() != c {
        return Err(FormatError::ShapeMismatch(format!(
            "{} channel names for {c} channels",
            header.channels.len()
        )));
    }
    if header.normalization.shift.len() != c || header.normalization.scale.len() != c {
        return Err(FormatError::ShapeMismatch(format!("normalization record does not cover {c} channels")));
    }
    if header.split > t {
        return Err(FormatError::ShapeMismatch(format!("split {} beyond {t} snapshots", header.split)));
    }
    let expected = 4 * t * c * h * w;
    if payload.len() != expected {
        // A payload that is a whole number of channels of the declared grid
        // is a shape disagreement rather than a cut-off file.
        let per_channel = 4 * t * h * w;
        if per_channel > 0 && !payload.is_empty() && payload.len() % per_channel == 0 {
            return Err(FormatError::ShapeMismatch(format!(
                "header declares {c} channels, payload holds {}",
                payload.len() / per_channel
            )));
        }
        if payload.len() < expected {
            return Err(FormatError::Truncated { expected, actual: payload.len() });
        }
        return Err(FormatError::ShapeMismatch(format!(
            "{} trailing bytes after the declared payload",
            payload.len() - expected
        )));
    }
    let data: Vec<f32> = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let snapshots = Tensor::new(&[t, c, h, w], data).map_err(|e| FormatError::ShapeMismatch(e.to_string()))?;
    Ok(Dataset { snapshots, channel_names: header.channels, normalization: header.normalization, split: header.split })
}

pub fn store(dataset: &Dataset, path: &Path) -> Result<(), FormatError> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    f.write_all(&encode(dataset))?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset, FormatError> {
    decode(&fs::read(path)?)
}
