//! Versioned model checkpoints: a JSON header (config, embodiment,
//! normalization stats, parameter directory split by transfer group)
//! followed by raw little-endian f64 parameter payloads. Trunk-only loading
//! reads the same file through `MxtModel::load_trunk_from`.

use super::model::MxtModel;
use super::MxtConfig;
use crate::dataset::NormStats;
use crate::nn::{ParamGroup, ParamStore, Scalar};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"XCK1";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes, not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: ParamGroup,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: MxtConfig,
    embodiment: String,
    stats: Option<NormStats>,
    params: Vec<ParamEntry>,
}

/// A loaded checkpoint; rebuild a model by constructing for the stored
/// embodiment and copying `store`, or pull only the trunk group.
pub struct Checkpoint<F: Scalar> {
    pub config: MxtConfig,
    pub embodiment: String,
    pub stats: Option<NormStats>,
    pub store: ParamStore<F>,
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    model: &MxtModel<F>,
    stats: Option<&NormStats>,
) -> Result<(), CheckpointError> {
    let header = Header {
        config: model.config.clone(),
        embodiment: model.spec.name.clone(),
        stats: stats.cloned(),
        params: model
            .store
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                group: p.group,
                rows: p.value.dim().0,
                cols: p.value.dim().1,
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    let payload: usize = header.params.iter().map(|p| p.rows * p.cols * 8).sum();
    let mut buf = Vec::with_capacity(16 + header_json.len() + payload);
    buf.write_all(MAGIC)?;
    buf.write_u32::<LittleEndian>(VERSION)?;
    buf.write_u64::<LittleEndian>(header_json.len() as u64)?;
    buf.write_all(&header_json)?;
    for p in model.store.iter() {
        for v in p.value.iter() {
            buf.write_f64::<LittleEndian>(v.to_f64())?;
        }
    }
    std::fs::write(path, &buf)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>, CheckpointError> {
    let bytes = std::fs::read(path)?;
    let mut cur = std::io::Cursor::new(&bytes[..]);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic)
        .map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| CheckpointError::CorruptHeader("missing version".into()))?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| CheckpointError::CorruptHeader("missing header length".into()))?
        as usize;
    let start = cur.position() as usize;
    if start + header_len > bytes.len() {
        return Err(CheckpointError::CorruptHeader(
            "header length exceeds file size".into(),
        ));
    }
    let header: Header = serde_json::from_slice(&bytes[start..start + header_len])
        .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;

    let expected: usize = header.params.iter().map(|p| p.rows * p.cols * 8).sum();
    let payload = &bytes[start + header_len..];
    if payload.len() != expected {
        return Err(CheckpointError::Truncated {
            expected,
            found: payload.len(),
        });
    }

    let mut cur = std::io::Cursor::new(payload);
    let mut store = ParamStore::new();
    for entry in &header.params {
        let mut arr = Array2::from_elem((entry.rows, entry.cols), F::ZERO);
        for v in arr.iter_mut() {
            *v = F::from_f64(cur.read_f64::<LittleEndian>()?);
        }
        store.add(&entry.name, entry.group, arr);
    }
    Ok(Checkpoint {
        config: header.config,
        embodiment: header.embodiment,
        stats: header.stats,
        store,
    })
}

/// Rebuild a runnable model from a checkpoint of the same embodiment.
pub fn model_from_checkpoint<F: Scalar>(
    ckpt: &Checkpoint<F>,
    spec: &crate::embodiment::EmbodimentSpec,
) -> Result<MxtModel<F>, CheckpointError> {
    if spec.name != ckpt.embodiment {
        return Err(CheckpointError::CorruptHeader(format!(
            "checkpoint is for embodiment {}, not {}",
            ckpt.embodiment, spec.name
        )));
    }
    let mut model = MxtModel::build(ckpt.config.clone(), spec, 0);
    for p in ckpt.store.iter() {
        if !model.store.contains(&p.name) {
            return Err(CheckpointError::CorruptHeader(format!(
                "unexpected parameter {} in checkpoint",
                p.name
            )));
        }
        let slot = model.store.slot(&p.name);
        if model.store.get(slot).value.dim() != p.value.dim() {
            return Err(CheckpointError::CorruptHeader(format!(
                "parameter {} has wrong shape",
                p.name
            )));
        }
        model.store.get_mut(slot).value = p.value.clone();
    }
    Ok(model)
}
