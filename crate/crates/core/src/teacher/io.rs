//! Float-grid container shared by teacher features (`BRTF`) and heatmaps
//! (`BRHM`): 4-byte magic, then little-endian `u32` version, side, depth,
//! and `side·side·depth` `f32` values.

use std::path::Path;

use super::grid::{GridSource, TeacherFeatureGrid};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"BRTF";
pub const HEATMAP_MAGIC: &[u8; 4] = b"BRHM";
pub const GRID_VERSION: u32 = 1;

pub fn encode_float_grid(magic: &[u8; 4], side: usize, depth: usize, values: &[f32]) -> Vec<u8> {
    debug_assert_eq!(values.len(), side * side * depth);
    let mut out = Vec::with_capacity(16 + values.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    out.extend_from_slice(&(side as u32).to_le_bytes());
    out.extend_from_slice(&(depth as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Returns `(side, depth, values)`.
pub fn decode_float_grid(magic: &[u8; 4], bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let word = |i: usize, field: &str| -> Result<u32> {
        bytes
            .get(4 + 4 * i..8 + 4 * i)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::format(field, "file truncated in header"))
    };
    match bytes.get(..4) {
        Some(m) if m == magic => {}
        Some(m) => {
            return Err(Error::format(
                "magic",
                format!("expected {:?}, found {:?}", String::from_utf8_lossy(magic), String::from_utf8_lossy(m)),
            ))
        }
        None => return Err(Error::format("magic", "file truncated")),
    }
    let version = word(0, "version")?;
    if version != GRID_VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let side = word(1, "grid_size")? as usize;
    let depth = word(2, "dim")? as usize;
    if side == 0 || depth == 0 {
        return Err(Error::format("shape", format!("{side}x{side}x{depth}")));
    }
    let n = side
        .checked_mul(side)
        .and_then(|x| x.checked_mul(depth))
        .ok_or_else(|| Error::format("shape", "overflow"))?;
    let payload = &bytes[16..];
    if payload.len() != n * 4 {
        return Err(Error::format(
            "payload",
            format!("{side}x{side}x{depth} needs {} bytes, found {}", n * 4, payload.len()),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok((side, depth, values))
}

pub fn encode_feature_grid(grid: &TeacherFeatureGrid) -> Vec<u8> {
    encode_float_grid(FEATURE_MAGIC, grid.grid_size(), grid.dim(), grid.features())
}

pub fn decode_feature_grid(bytes: &[u8]) -> Result<TeacherFeatureGrid> {
    let (side, depth, values) = decode_float_grid(FEATURE_MAGIC, bytes)?;
    TeacherFeatureGrid::new(side, depth, values, GridSource::File)
}

pub fn save_feature_grid(grid: &TeacherFeatureGrid, path: &Path) -> Result<()> {
    std::fs::write(path, encode_feature_grid(grid)).map_err(|e| Error::io(path, e))
}

pub fn load_feature_grid(path: &Path) -> Result<TeacherFeatureGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_grid(&bytes)
}
