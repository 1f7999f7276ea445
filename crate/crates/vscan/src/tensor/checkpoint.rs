//! Binary checkpoint format for [`ParamSet`]s.
//!
//! Layout: the 4-byte magic `VXF1`, a little-endian `u32` header length, a
//! JSON header, then a packed little-endian `f32` payload. The header
//! manifest records every entry's name, kind, shape and byte offset into
//! the payload, plus a free-form architecture descriptor so loaders can
//! rebuild the right model before copying weights in.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ParamSet, Scalar};

pub const MAGIC: &[u8; 4] = b"VXF1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic at byte 0: expected \"VXF1\", got {got:?}")]
    BadMagic { got: Vec<u8> },
    #[error("truncated file: expected {expected} bytes at offset {offset}, got {got}")]
    Truncated {
        expected: usize,
        got: usize,
        offset: usize,
    },
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("entry {name}: shape {shape:?} implies {expected} floats, payload slice has {got}")]
    EntryLength {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    RunningMean,
    RunningVar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    /// Byte offset of this entry's data within the payload.
    pub offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    arch: String,
    entries: Vec<CheckpointEntry>,
}

/// A parsed checkpoint: architecture descriptor plus named float blocks.
#[derive(Debug)]
pub struct Checkpoint {
    pub arch: String,
    pub entries: Vec<CheckpointEntry>,
    payload: Vec<f32>,
}

impl Checkpoint {
    pub fn entry_data(&self, e: &CheckpointEntry) -> &[f32] {
        let start = (e.offset / 4) as usize;
        let n: usize = e.shape.iter().product();
        &self.payload[start..start + n]
    }

    /// Copy every stored entry into a freshly constructed [`ParamSet`]
    /// whose names must match (model code builds the set, this fills it).
    pub fn load_into<S: Scalar>(&self, ps: &mut ParamSet<S>) -> Result<(), CheckpointError> {
        for e in &self.entries {
            let data: Vec<S> = self
                .entry_data(e)
                .iter()
                .map(|&v| S::from_f64(v as f64))
                .collect();
            let res = match e.kind {
                EntryKind::Param => ps.set_named(&e.name, &data),
                EntryKind::RunningMean => {
                    let (_, var) = ps
                        .iter_stats_named()
                        .find(|(n, _, _)| *n == e.name)
                        .map(|(_, m, v)| (m.to_vec(), v.to_vec()))
                        .ok_or_else(|| CheckpointError::EntryLength {
                            name: e.name.clone(),
                            shape: e.shape.clone(),
                            expected: 0,
                            got: 0,
                        })?;
                    ps.set_stat_named(&e.name, &data, &var)
                }
                EntryKind::RunningVar => {
                    let (mean, _) = ps
                        .iter_stats_named()
                        .find(|(n, _, _)| *n == e.name)
                        .map(|(_, m, v)| (m.to_vec(), v.to_vec()))
                        .ok_or_else(|| CheckpointError::EntryLength {
                            name: e.name.clone(),
                            shape: e.shape.clone(),
                            expected: 0,
                            got: 0,
                        })?;
                    ps.set_stat_named(&e.name, &mean, &data)
                }
            };
            res.map_err(|_| CheckpointError::EntryLength {
                name: e.name.clone(),
                shape: e.shape.clone(),
                expected: e.shape.iter().product(),
                got: self.entry_data(e).len(),
            })?;
        }
        Ok(())
    }
}

/// Serialize a parameter set (weights plus running statistics) to `path`.
pub fn save_checkpoint<S: Scalar>(
    ps: &ParamSet<S>,
    arch: &str,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut entries = Vec::new();
    let mut payload: Vec<f32> = Vec::new();
    for (name, shape, data) in ps.iter_named() {
        entries.push(CheckpointEntry {
            name: name.to_string(),
            kind: EntryKind::Param,
            shape: shape.to_vec(),
            offset: (payload.len() * 4) as u64,
        });
        payload.extend(data.iter().map(|&v| v.to_f64() as f32));
    }
    for (name, mean, var) in ps.iter_stats_named() {
        entries.push(CheckpointEntry {
            name: name.to_string(),
            kind: EntryKind::RunningMean,
            shape: vec![mean.len()],
            offset: (payload.len() * 4) as u64,
        });
        payload.extend(mean.iter().map(|&v| v.to_f64() as f32));
        entries.push(CheckpointEntry {
            name: name.to_string(),
            kind: EntryKind::RunningVar,
            shape: vec![var.len()],
            offset: (payload.len() * 4) as u64,
        });
        payload.extend(var.iter().map(|&v| v.to_f64() as f32));
    }
    let header = Header {
        version: 1,
        arch: arch.to_string(),
        entries,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(MAGIC).map_err(io_err)?;
    f.write_all(&(header_bytes.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    f.write_all(&header_bytes).map_err(io_err)?;
    let mut bytes = Vec::with_capacity(payload.len() * 4);
    for v in &payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes).map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut buf)
        .map_err(io_err)?;
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(CheckpointError::BadMagic {
            got: buf.get(..4).unwrap_or(&buf).to_vec(),
        });
    }
    if buf.len() < 8 {
        return Err(CheckpointError::Truncated {
            expected: 8,
            got: buf.len(),
            offset: 4,
        });
    }
    let hlen = u32::from_le_bytes([buf[4], buf[5], buf[6], buf[7]]) as usize;
    if buf.len() < 8 + hlen {
        return Err(CheckpointError::Truncated {
            expected: 8 + hlen,
            got: buf.len(),
            offset: 8,
        });
    }
    let header: Header = serde_json::from_slice(&buf[8..8 + hlen])?;
    let body = &buf[8 + hlen..];
    if body.len() % 4 != 0 {
        return Err(CheckpointError::Truncated {
            expected: body.len() + 4 - body.len() % 4,
            got: body.len(),
            offset: 8 + hlen,
        });
    }
    let payload: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    for e in &header.entries {
        let start = (e.offset / 4) as usize;
        let n: usize = e.shape.iter().product();
        if start + n > payload.len() {
            return Err(CheckpointError::EntryLength {
                name: e.name.clone(),
                shape: e.shape.clone(),
                expected: n,
                got: payload.len().saturating_sub(start),
            });
        }
    }
    Ok(Checkpoint {
        arch: header.arch,
        entries: header.entries,
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_params() -> ParamSet<f32> {
        let mut ps: ParamSet<f32> = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        ps.param("conv.w", &[2, 1, 3, 3, 3], Init::KaimingUniform { fan_in: 27 }, &mut rng);
        ps.param("bn.gamma", &[2], Init::Ones, &mut rng);
        ps.stat("bn", 2);
        ps
    }

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = std::env::temp_dir().join(format!("vxf1_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.vxf");
        let ps = sample_params();
        save_checkpoint(&ps, "test-arch", &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.arch, "test-arch");
        let mut ps2 = sample_params();
        // scramble then restore
        for v in ps2.data_mut(crate::tensor::ParamId(0)) {
            *v = 0.0;
        }
        ck.load_into(&mut ps2).unwrap();
        assert_eq!(ps.checksum(), ps2.checksum());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = std::env::temp_dir().join(format!("vxf1_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.vxf");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncation_is_reported_with_offsets() {
        let dir = std::env::temp_dir().join(format!("vxf1_tr_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.vxf");
        save_checkpoint(&sample_params(), "a", &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 5]).unwrap();
        match load_checkpoint(&path) {
            Err(CheckpointError::Truncated { .. }) | Err(CheckpointError::EntryLength { .. }) => {}
            other => panic!("expected truncation error, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
