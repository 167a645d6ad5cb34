//! Binary episode container: a small JSON header describing the layout
//! followed by raw little-endian frame payloads. Numeric data round-trips
//! bit-exactly.

use super::{Episode, Frame, Image, ModalitySchema, ObsShape, ObsValue};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"XEP1";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EpisodeIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes, not an episode file")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

#[derive(Serialize, Deserialize)]
struct Header {
    embodiment: String,
    schema: ModalitySchema,
    masks: super::MaskSnapshot,
    meta: super::EpisodeMeta,
    frame_count: u64,
}

fn frame_byte_len(schema: &ModalitySchema) -> usize {
    let mut n = 8; // timestamp
    for shape in schema.obs.values() {
        n += match shape {
            ObsShape::Image { c, h, w } => c * h * w,
            ObsShape::Vector { dim } => dim * 8,
        };
    }
    for dim in schema.act.values() {
        n += dim * 8;
    }
    n
}

fn validate_schema(schema: &ModalitySchema) -> Result<(), EpisodeIoError> {
    for (m, shape) in &schema.obs {
        match (m.vector_dim(), shape) {
            (Some(d), ObsShape::Vector { dim }) if *dim == d => {}
            (None, ObsShape::Image { c, h, w }) if *c > 0 && *h > 0 && *w > 0 => {}
            _ => {
                return Err(EpisodeIoError::SchemaMismatch(format!(
                    "obs modality {} has an incompatible shape",
                    m.name()
                )))
            }
        }
    }
    for (m, dim) in &schema.act {
        if *dim != m.dim() {
            return Err(EpisodeIoError::SchemaMismatch(format!(
                "act modality {} has dim {dim}, expected {}",
                m.name(),
                m.dim()
            )));
        }
    }
    Ok(())
}

pub fn save_episode(episode: &Episode, path: &Path) -> Result<(), EpisodeIoError> {
    validate_schema(&episode.schema)?;
    let header = Header {
        embodiment: episode.embodiment.clone(),
        schema: episode.schema.clone(),
        masks: episode.masks.clone(),
        meta: episode.meta.clone(),
        frame_count: episode.frames.len() as u64,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| EpisodeIoError::CorruptHeader(e.to_string()))?;

    let mut buf: Vec<u8> = Vec::with_capacity(
        16 + header_json.len() + episode.frames.len() * frame_byte_len(&episode.schema),
    );
    buf.write_all(MAGIC)?;
    buf.write_u32::<LittleEndian>(VERSION)?;
    buf.write_u64::<LittleEndian>(header_json.len() as u64)?;
    buf.write_all(&header_json)?;

    for frame in &episode.frames {
        buf.write_f64::<LittleEndian>(frame.timestamp)?;
        for (m, shape) in &episode.schema.obs {
            match (frame.obs.get(m), shape) {
                (Some(ObsValue::Image(img)), ObsShape::Image { c, h, w }) => {
                    debug_assert_eq!(img.data.len(), c * h * w);
                    buf.write_all(&img.data)?;
                }
                (Some(ObsValue::Vector(v)), ObsShape::Vector { dim }) => {
                    debug_assert_eq!(v.len(), *dim);
                    for &x in v {
                        buf.write_f64::<LittleEndian>(x)?;
                    }
                }
                _ => {
                    return Err(EpisodeIoError::SchemaMismatch(format!(
                        "frame missing obs modality {}",
                        m.name()
                    )))
                }
            }
        }
        for (m, dim) in &episode.schema.act {
            let v = frame.act.get(m).ok_or_else(|| {
                EpisodeIoError::SchemaMismatch(format!("frame missing act modality {}", m.name()))
            })?;
            debug_assert_eq!(v.len(), *dim);
            for &x in v {
                buf.write_f64::<LittleEndian>(x)?;
            }
        }
    }

    std::fs::write(path, &buf)?;
    Ok(())
}

pub fn load_episode(path: &Path) -> Result<Episode, EpisodeIoError> {
    let bytes = std::fs::read(path)?;
    let mut cur = std::io::Cursor::new(&bytes[..]);

    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| EpisodeIoError::BadMagic)?;
    if &magic != MAGIC {
        return Err(EpisodeIoError::BadMagic);
    }
    let version = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| EpisodeIoError::CorruptHeader("missing version".into()))?;
    if version != VERSION {
        return Err(EpisodeIoError::UnsupportedVersion(version));
    }
    let header_len = cur
        .read_u64::<LittleEndian>()
        .map_err(|_| EpisodeIoError::CorruptHeader("missing header length".into()))?
        as usize;
    let header_start = cur.position() as usize;
    if header_start + header_len > bytes.len() {
        return Err(EpisodeIoError::CorruptHeader(
            "header length exceeds file size".into(),
        ));
    }
    let header: Header = serde_json::from_slice(&bytes[header_start..header_start + header_len])
        .map_err(|e| EpisodeIoError::CorruptHeader(e.to_string()))?;
    validate_schema(&header.schema)?;

    let payload = &bytes[header_start + header_len..];
    let expected = header.frame_count as usize * frame_byte_len(&header.schema);
    if payload.len() != expected {
        return Err(EpisodeIoError::Truncated {
            expected,
            found: payload.len(),
        });
    }

    let mut cur = std::io::Cursor::new(payload);
    let mut frames = Vec::with_capacity(header.frame_count as usize);
    for _ in 0..header.frame_count {
        let timestamp = cur.read_f64::<LittleEndian>()?;
        let mut obs = BTreeMap::new();
        for (m, shape) in &header.schema.obs {
            let v = match shape {
                ObsShape::Image { c, h, w } => {
                    let mut data = vec![0u8; c * h * w];
                    cur.read_exact(&mut data)?;
                    ObsValue::Image(Image {
                        c: *c,
                        h: *h,
                        w: *w,
                        data,
                    })
                }
                ObsShape::Vector { dim } => {
                    let mut v = vec![0.0; *dim];
                    for x in v.iter_mut() {
                        *x = cur.read_f64::<LittleEndian>()?;
                    }
                    ObsValue::Vector(v)
                }
            };
            obs.insert(*m, v);
        }
        let mut act = BTreeMap::new();
        for (m, dim) in &header.schema.act {
            let mut v = vec![0.0; *dim];
            for x in v.iter_mut() {
                *x = cur.read_f64::<LittleEndian>()?;
            }
            act.insert(*m, v);
        }
        frames.push(Frame {
            obs,
            act,
            timestamp,
        });
    }

    Ok(Episode {
        embodiment: header.embodiment,
        schema: header.schema,
        frames,
        masks: header.masks,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::super::synthetic::random_episode;
    use super::*;
    use crate::embodiment::builtin;

    fn roundtrip_name(name: &str) {
        let spec = builtin(name).unwrap();
        let ep = random_episode(&spec, 42, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.xep");
        save_episode(&ep, &path).unwrap();
        let back = load_episode(&path).unwrap();
        // Bit-exact round trip, including NaN-free float payloads and images.
        assert_eq!(ep, back);
    }

    #[test]
    fn roundtrip_all_builtins() {
        for name in crate::embodiment::BUILTIN_NAMES {
            roundtrip_name(name);
        }
    }

    #[test]
    fn roundtrip_preserves_special_floats() {
        let spec = builtin("human-uni-r").unwrap();
        let mut ep = random_episode(&spec, 1, 2);
        ep.frames[0].timestamp = -0.0;
        ep.frames[1].timestamp = f64::MIN_POSITIVE;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.xep");
        save_episode(&ep, &path).unwrap();
        let back = load_episode(&path).unwrap();
        assert_eq!(back.frames[0].timestamp.to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.frames[1].timestamp, f64::MIN_POSITIVE);
    }

    #[test]
    fn bad_magic_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.xep");
        std::fs::write(&path, b"NOPEid better be rejected").unwrap();
        assert!(matches!(load_episode(&path), Err(EpisodeIoError::BadMagic)));
    }

    #[test]
    fn corrupt_header_detected() {
        let spec = builtin("human-uni-r").unwrap();
        let ep = random_episode(&spec, 2, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.xep");
        save_episode(&ep, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[20] = b'!'; // inside the JSON header
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_episode(&path),
            Err(EpisodeIoError::CorruptHeader(_))
        ));
    }

    #[test]
    fn truncation_detected() {
        let spec = builtin("locoman-bi").unwrap();
        let ep = random_episode(&spec, 3, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.xep");
        save_episode(&ep, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            load_episode(&path),
            Err(EpisodeIoError::Truncated { .. })
        ));
    }

    #[test]
    fn wrong_version_detected() {
        let spec = builtin("human-uni-r").unwrap();
        let ep = random_episode(&spec, 4, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.xep");
        save_episode(&ep, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_episode(&path),
            Err(EpisodeIoError::UnsupportedVersion(99))
        ));
    }
}
