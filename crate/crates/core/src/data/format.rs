//! Binary container shared by datasets and checkpoints:
//!
//! ```text
//! [0, 8)        magic bytes
//! [8, 12)       u32 LE format version
//! [12, 20)      u64 LE header length H
//! [20, 20+H)    UTF-8 JSON header; must contain "payload_len" (f64 count)
//! [20+H, ...)   payload_len × f64 LE
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetMeta, Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"TGNNDATA";
pub const DATASET_VERSION: u32 = 1;

const PREFIX: usize = 20;

pub fn write_container(magic: &[u8; 8], version: u32, header: &serde_json::Value, payload: &[f64]) -> Result<Vec<u8>> {
    let mut header = header.clone();
    let obj = header
        .as_object_mut()
        .ok_or_else(|| Error::Contract("container header must be a JSON object".into()))?;
    obj.insert("payload_len".into(), payload.len().into());
    obj.insert("endianness".into(), "little".into());
    let h = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX + h.len() + 8 * payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    for x in payload {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

/// Parses a container, returning its JSON header and payload.
pub fn read_container(
    bytes: &[u8],
    magic: &'static [u8; 8],
    supported: u32,
) -> Result<(serde_json::Value, Vec<f64>)> {
    let kind = std::str::from_utf8(magic).unwrap_or("container");
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(Error::BadMagic(kind));
    }
    if bytes.len() < PREFIX {
        return Err(Error::Truncated {
            expected: PREFIX,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != supported {
        return Err(Error::VersionMismatch {
            found: version,
            supported,
        });
    }
    let h_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[PREFIX..];
    if body.len() < h_len {
        return Err(Error::Truncated {
            expected: PREFIX + h_len,
            found: bytes.len(),
        });
    }
    let header: serde_json::Value = serde_json::from_slice(&body[..h_len])?;
    match header.get("endianness").and_then(|e| e.as_str()) {
        Some("little") => {}
        other => return Err(Error::HeaderMismatch(format!("unsupported endianness tag {other:?}"))),
    }
    let n = header
        .get("payload_len")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::HeaderMismatch("header lacks payload_len".into()))? as usize;
    let raw = &body[h_len..];
    let need = n * 8;
    if raw.len() < need {
        return Err(Error::Truncated {
            expected: PREFIX + h_len + need,
            found: bytes.len(),
        });
    }
    if raw.len() > need {
        return Err(Error::HeaderMismatch(format!(
            "{} trailing bytes after the declared payload",
            raw.len() - need
        )));
    }
    let payload = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

#[derive(Serialize, Deserialize)]
struct TrajectoryHeader {
    n_v: usize,
    node_types: Vec<usize>,
    /// `[n_steps+1, n_v, n_dof]`.
    state_shape: [usize; 3],
    /// `[n_v, d_space]`.
    load_shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    meta: DatasetMeta,
    trajectories: Vec<TrajectoryHeader>,
}

pub fn encode_dataset(ds: &TrajectoryDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let n_dof = ds.n_dof();
    let d = ds.meta.d_space();
    let header = DatasetHeader {
        meta: ds.meta.clone(),
        trajectories: ds
            .trajectories
            .iter()
            .map(|t| TrajectoryHeader {
                n_v: t.n_v,
                node_types: t.node_types.clone(),
                state_shape: [ds.meta.n_steps + 1, t.n_v, n_dof],
                load_shape: [t.n_v, d],
            })
            .collect(),
    };
    let payload: Vec<f64> = ds
        .trajectories
        .iter()
        .flat_map(|t| t.states.iter().chain(&t.loads).copied())
        .collect();
    write_container(DATASET_MAGIC, DATASET_VERSION, &serde_json::to_value(&header)?, &payload)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<TrajectoryDataset> {
    let (header, payload) = read_container(bytes, DATASET_MAGIC, DATASET_VERSION)?;
    let header: DatasetHeader = serde_json::from_value(header)?;
    let n_dof = header.meta.n_dof();
    let d = header.meta.d_space();
    let mut offset = 0;
    let mut trajectories = Vec::with_capacity(header.trajectories.len());
    for (k, t) in header.trajectories.into_iter().enumerate() {
        if t.state_shape != [header.meta.n_steps + 1, t.n_v, n_dof] || t.load_shape != [t.n_v, d] {
            return Err(Error::HeaderMismatch(format!(
                "trajectory {k}: shapes {:?}/{:?} disagree with metadata",
                t.state_shape, t.load_shape
            )));
        }
        let n_states = t.state_shape.iter().product::<usize>();
        let n_loads = t.n_v * d;
        if offset + n_states + n_loads > payload.len() {
            return Err(Error::HeaderMismatch(format!(
                "trajectory {k}: shapes exceed the declared payload"
            )));
        }
        let states = payload[offset..offset + n_states].to_vec();
        offset += n_states;
        let loads = payload[offset..offset + n_loads].to_vec();
        offset += n_loads;
        trajectories.push(Trajectory {
            n_v: t.n_v,
            states,
            loads,
            node_types: t.node_types,
        });
    }
    if offset != payload.len() {
        return Err(Error::HeaderMismatch(format!(
            "{} payload values not claimed by any trajectory",
            payload.len() - offset
        )));
    }
    let ds = TrajectoryDataset {
        meta: header.meta,
        trajectories,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &TrajectoryDataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(ds)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<TrajectoryDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
