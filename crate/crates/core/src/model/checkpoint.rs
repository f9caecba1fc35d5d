//! Binary checkpoint: magic, endianness mark, a JSON header describing the
//! configuration, vocabulary and tensor layout, then little-endian `f32`
//! payloads in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelParams};
use crate::corpus::Vocabulary;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"LNARCKP1";
const ENDIAN_MARK: u32 = 0x0102_0304;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    /// Offset into the payload, in `f32` elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    num_items: usize,
    num_categories: usize,
    /// Category of every item.
    categories: Vec<u32>,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let path = path.as_ref();
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0;
    for (name, t) in model.params.tensors() {
        entries.push(TensorEntry {
            name,
            shape: [t.nrows(), t.ncols()],
            offset,
        });
        offset += t.len();
        for v in t.iter() {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let header = Header {
        config: model.config,
        num_items: model.vocab.num_items(),
        num_categories: model.vocab.num_categories(),
        categories: model.vocab.item_to_category().to_vec(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut bytes = Vec::with_capacity(20 + json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&ENDIAN_MARK.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    if u32::from_le_bytes(bytes[8..12].try_into().unwrap()) != ENDIAN_MARK {
        return Err(bad("unsupported byte order".into()));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(e.to_string()))?;
    let payload = &bytes[header_end..];

    let raw: Vec<u64> = header.categories.iter().map(|&c| c as u64).collect();
    let vocab = Vocabulary::from_assignment(&raw)?;
    if vocab.num_items() != header.num_items || vocab.num_categories() != header.num_categories {
        return Err(bad("vocabulary sizes disagree with the category map".into()));
    }
    let mut params = ModelParams::zeros(&header.config, &vocab);
    let mut slots = params.tensors_mut();
    if slots.len() != header.tensors.len() {
        return Err(bad(format!(
            "expected {} tensors, found {}",
            slots.len(),
            header.tensors.len()
        )));
    }
    for ((name, tensor), entry) in slots.iter_mut().zip(&header.tensors) {
        if *name != entry.name || [tensor.nrows(), tensor.ncols()] != entry.shape {
            return Err(bad(format!("tensor `{}` does not match `{name}`", entry.name)));
        }
        let start = entry.offset * 4;
        let end = start + tensor.len() * 4;
        let chunk = payload
            .get(start..end)
            .ok_or_else(|| bad(format!("payload too short for `{name}`")))?;
        for (v, b) in tensor.iter_mut().zip(chunk.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().unwrap()) as f64;
        }
    }
    drop(slots);
    Model::from_parts(header.config, vocab, params)
}
