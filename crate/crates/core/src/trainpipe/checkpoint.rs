//! `BRCK` checkpoint container.
//!
//! ```text
//! "BRCK" u32 version u32 header_len  header (JSON)
//! payload: repeated { u32 name_len, name, u32 ndim, ndim × u32 dims, f32 data }
//! ```
//!
//! The header stores the sha256 of the payload. Parameters come first in
//! store order, then `adam.m.<name>` / `adam.v.<name>` for every parameter
//! that has optimizer moments.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::Moments;
use super::{StageSpec, TrainState};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{BreenConfig, BreenModel};
use crate::numcore::Array;
use crate::sequence::Stage;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: BreenConfig,
    pub config_hash: String,
    pub stage: Stage,
    pub step: u64,
    pub spec: StageSpec,
    pub data_seed: u64,
    pub payload_sha256: String,
    /// Update count per parameter with moments.
    pub adam_t: BTreeMap<String, u64>,
    pub history: Vec<LossBreakdown>,
}

fn put_array(out: &mut Vec<u8>, name: &str, a: &Array<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
    for &d in a.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in a.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(field, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn array(&mut self) -> Result<(String, Array<f32>)> {
        let n = self.u32("array name")? as usize;
        let name = String::from_utf8(self.take(n, "array name")?.to_vec())
            .map_err(|_| Error::format("array name", "not utf-8"))?;
        let ndim = self.u32(&name)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32(&name)? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = self.take(len * 4, &name)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        Ok((name, Array::new(shape, data)?))
    }
}

pub fn encode_checkpoint(model: &BreenModel, state: &TrainState) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    for p in model.params.iter() {
        put_array(&mut payload, &p.name, &p.value);
    }
    let mut adam_t = BTreeMap::new();
    for (name, m) in &state.moments {
        put_array(&mut payload, &format!("adam.m.{name}"), &m.m);
        put_array(&mut payload, &format!("adam.v.{name}"), &m.v);
        adam_t.insert(name.clone(), m.t);
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        config_hash: model.config.hash(),
        stage: state.spec.stage,
        step: state.step,
        spec: state.spec.clone(),
        data_seed: state.data_seed,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        adam_t,
        history: state.history.iter().copied().collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(BreenModel, TrainState)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format("magic", "not a BRCK checkpoint"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("version", format!("unsupported checkpoint version {version}")));
    }
    let hlen = r.u32("header length")? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen, "header")?)?;
    let payload = &bytes[r.pos..];
    let found = hex::encode(Sha256::digest(payload));
    if found != header.payload_sha256 {
        return Err(Error::Checksum {
            expected: header.payload_sha256,
            found,
        });
    }
    let recomputed = header.config.hash();
    if recomputed != header.config_hash {
        return Err(Error::ConfigHashMismatch {
            expected: header.config_hash,
            found: recomputed,
        });
    }
    let mut model = BreenModel::new(header.config.clone())?;
    let mut named = Vec::with_capacity(model.params.len());
    for _ in 0..model.params.len() {
        named.push(r.array()?);
    }
    model.params.load_from(named)?;
    let mut moments = BTreeMap::new();
    for (name, &t) in &header.adam_t {
        let (mn, m) = r.array()?;
        let (vn, v) = r.array()?;
        if mn != format!("adam.m.{name}") || vn != format!("adam.v.{name}") {
            return Err(Error::format("moments", format!("expected moments of {name}, found {mn} / {vn}")));
        }
        moments.insert(name.clone(), Moments { m, v, t });
    }
    if r.pos != bytes.len() {
        return Err(Error::format("payload", "trailing bytes after the last array"));
    }
    let state = TrainState {
        step: header.step,
        spec: header.spec,
        data_seed: header.data_seed,
        moments,
        history: header.history.into_iter().collect(),
    };
    Ok((model, state))
}

pub fn save_checkpoint(model: &BreenModel, state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, state)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(BreenModel, TrainState)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Load a checkpoint for resuming a run configured as `expected`.
pub fn load_for_resume(path: &Path, expected: &BreenConfig) -> Result<(BreenModel, TrainState)> {
    let (model, state) = load_checkpoint(path)?;
    let (want, got) = (expected.hash(), model.config.hash());
    if want != got {
        return Err(Error::ConfigHashMismatch {
            expected: want,
            found: got,
        });
    }
    Ok((model, state))
}
