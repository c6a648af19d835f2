//! Binary checkpoint container: a magic tag, a JSON header describing the
//! configuration and the category dictionaries, then named little-endian
//! f32 arrays in visit order. Loading rebuilds the model from the stored
//! config and overwrites every parameter, so a save/load cycle is exact at
//! f32 precision.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::encoder::TextEmbedding;
use crate::error::Error;
use crate::nn::ParamSet;

use super::train::DetectorModel;
use super::DetectorConfig;

const MAGIC: &[u8; 8] = b"ZSDETCK1";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: DetectorConfig,
    /// Identifies the encoder whose embedding space the weights live in.
    encoder_fingerprint: u64,
    base: Vec<NamedVec>,
    novel: Vec<NamedVec>,
    arrays: Vec<ArrayMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NamedVec {
    name: String,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
}

fn embed_to_named(e: &TextEmbedding) -> NamedVec {
    NamedVec {
        name: e.category_name.clone(),
        values: e.values.to_vec(),
    }
}

fn named_to_embed(n: &NamedVec) -> TextEmbedding {
    TextEmbedding {
        category_name: n.name.clone(),
        values: n.values.clone().into(),
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &mut DetectorModel,
    encoder_fingerprint: u64,
) -> Result<(), Error> {
    let snap = model.snapshot();
    let header = Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: model.cfg.clone(),
        encoder_fingerprint,
        base: model.classifier.base.iter().map(embed_to_named).collect(),
        novel: model.classifier.novel.iter().map(embed_to_named).collect(),
        arrays: snap
            .iter()
            .map(|(n, a)| ArrayMeta {
                name: n.clone(),
                shape: a.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, a) in &snap {
        for v in a.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, returning the rebuilt model and the encoder
/// fingerprint recorded at save time.
pub fn load_checkpoint(path: &Path) -> Result<(DetectorModel, u64), Error> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header_json)?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }

    let mut payload = Vec::new();
    file.read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    let expect: usize = header.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
    if payload.len() != expect * 4 {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            expect * 4
        )));
    }

    let base: Vec<TextEmbedding> = header.base.iter().map(named_to_embed).collect();
    let novel: Vec<TextEmbedding> = header.novel.iter().map(named_to_embed).collect();
    let mut model = DetectorModel::new(header.config, base)?;
    model.classifier.novel = novel;

    let mut snap: BTreeMap<String, ArrayD<f64>> = BTreeMap::new();
    let mut off = 0usize;
    for meta in &header.arrays {
        let n: usize = meta.shape.iter().product();
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            let b: [u8; 4] = payload[off..off + 4].try_into().unwrap();
            vals.push(f32::from_le_bytes(b) as f64);
            off += 4;
        }
        let arr = ArrayD::from_shape_vec(meta.shape.clone(), vals)
            .map_err(|e| Error::Checkpoint(format!("array {}: {e}", meta.name)))?;
        snap.insert(meta.name.clone(), arr);
    }
    model.load_snapshot(&snap).map_err(Error::Checkpoint)?;
    Ok((model, header.encoder_fingerprint))
}
