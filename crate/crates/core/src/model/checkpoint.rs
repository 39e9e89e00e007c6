//! Checkpoint container: `u64` little-endian header length, a JSON header,
//! then every array as raw little-endian `f64` values in index order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::Vocabulary;
use crate::error::ModelError;
use crate::model::bundle::ModelBundle;
use crate::model::config::{FreezeFlags, Group, ModelConfig};
use crate::tensor::Mat;

const FORMAT: &str = "ier-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    group: Group,
    shape: [usize; 2],
    /// Byte offset from the start of the data section.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    freeze: FreezeFlags,
    vocab: Vec<String>,
    arrays: Vec<ArrayEntry>,
}

pub fn to_bytes(bundle: &ModelBundle) -> Result<Vec<u8>, ModelError> {
    let mut offset = 0;
    let arrays = bundle
        .params()
        .iter()
        .map(|p| {
            let e = ArrayEntry {
                name: p.name.clone(),
                group: p.group,
                shape: [p.value.rows(), p.value.cols()],
                offset,
            };
            offset += p.value.data().len() * 8;
            e
        })
        .collect();
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: bundle.config().clone(),
        freeze: bundle.freeze,
        vocab: bundle.vocab().pieces().to_vec(),
        arrays,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + offset);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in bundle.params() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelBundle, ModelError> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let data = &bytes[header_end..];
    let vocab = Vocabulary::from_pieces(header.vocab)?;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    let mut expected_offset = 0;
    for e in &header.arrays {
        let n = e.shape[0] * e.shape[1];
        if e.offset != expected_offset {
            return Err(ModelError::Checkpoint(format!("array {} has offset {}, expected {expected_offset}", e.name, e.offset)));
        }
        let end = e.offset + n * 8;
        if end > data.len() {
            return Err(ModelError::Checkpoint(format!(
                "array {} needs bytes {}..{end} but data has {}",
                e.name,
                e.offset,
                data.len()
            )));
        }
        let values = data[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push((e.name.clone(), Mat::from_vec(e.shape[0], e.shape[1], values)));
        expected_offset = end;
    }
    if expected_offset != data.len() {
        return Err(ModelError::Checkpoint(format!(
            "{} trailing bytes after the last array",
            data.len() - expected_offset
        )));
    }
    ModelBundle::from_parts(header.config, header.freeze, vocab, arrays)
}

pub fn save(bundle: &ModelBundle, path: &Path) -> Result<(), ModelError> {
    let bytes = to_bytes(bundle)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelBundle, ModelError> {
    from_bytes(&fs::read(path)?)
}
