//! Checkpoint files.
//!
//! Layout, little-endian: `FCKP`, u16 version, u32 length + JSON model
//! config, u32 parameter count, then per parameter: u16 name length, name,
//! u8 group tag, u8 rank, u32 per dimension, f64 values. A trailing u8 flags
//! an optional training section: u32 length + JSON metadata, u32 moment
//! count, then per moment: u16 name length, name, u64 step, m and v values.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Group, MomentState, Tensor};

use super::{build_model, ModelConfig, ModelState};

const MAGIC: &[u8; 4] = b"FCKP";
const VERSION: u16 = 1;

/// Optimizer and loop state stored next to the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSnapshot {
    pub meta: serde_json::Value,
    /// Moments keyed by parameter name.
    pub moments: Vec<(String, MomentState)>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn encode(state: &ModelState, train: Option<&TrainSnapshot>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&state.config).map_err(|e| Error::Format(e.to_string()))?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(state.store.len() as u32).to_le_bytes());
    for (_, p) in state.store.iter() {
        put_str(&mut out, &p.name);
        out.push(p.group.tag());
        out.push(p.tensor.shape().len() as u8);
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f64s(&mut out, p.tensor.data());
    }
    match train {
        None => out.push(0),
        Some(t) => {
            out.push(1);
            let meta = serde_json::to_vec(&t.meta).map_err(|e| Error::Format(e.to_string()))?;
            out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
            out.extend_from_slice(&meta);
            out.extend_from_slice(&(t.moments.len() as u32).to_le_bytes());
            for (name, m) in &t.moments {
                put_str(&mut out, name);
                out.extend_from_slice(&m.step.to_le_bytes());
                put_f64s(&mut out, &m.m);
                put_f64s(&mut out, &m.v);
            }
        }
    }
    Ok(out)
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save_checkpoint(path: &Path, state: &ModelState, train: Option<&TrainSnapshot>) -> Result<()> {
    let bytes = encode(state, train)?;
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
        w.get_ref().sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<usize> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]) as usize)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Loads a checkpoint; names, shapes and groups must match the layout the
/// stored config builds, exactly.
pub fn load_checkpoint(path: &Path) -> Result<(ModelState, Option<TrainSnapshot>)> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&data)
}

fn decode(data: &[u8]) -> Result<(ModelState, Option<TrainSnapshot>)> {
    let mut r = Reader { data, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u16()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()?;
    let config: ModelConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::Format(format!("config: {e}")))?;
    let mut state = build_model(&config, 0)?;
    let count = r.u32()?;
    if count != state.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} parameters, config expects {}",
            state.store.len()
        )));
    }
    for _ in 0..count {
        let name = r.string()?;
        let group = Group::from_tag(r.u8()?)
            .ok_or_else(|| Error::Format(format!("bad group tag for {name}")))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let values = r.f64s(shape.iter().product())?;
        let id = state
            .store
            .find(&name)
            .ok_or_else(|| Error::Format(format!("unexpected parameter {name}")))?;
        let expected = state.store.get(id);
        if expected.group != group || expected.tensor.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "parameter {name}: stored {group:?} {shape:?}, expected {:?} {:?}",
                expected.group,
                expected.tensor.shape()
            )));
        }
        *state.store.value_mut(id) = Tensor::new(shape, values)?;
    }
    let train = match r.u8()? {
        0 => None,
        1 => {
            let n = r.u32()?;
            let meta = serde_json::from_slice(r.take(n)?)
                .map_err(|e| Error::Format(format!("train meta: {e}")))?;
            let count = r.u32()?;
            let mut moments = Vec::with_capacity(count);
            for _ in 0..count {
                let name = r.string()?;
                let id = state
                    .store
                    .find(&name)
                    .ok_or_else(|| Error::Format(format!("moment for unknown parameter {name}")))?;
                let len = state.store.value(id).len();
                let step = r.u64()?;
                let m = r.f64s(len)?;
                let v = r.f64s(len)?;
                moments.push((name, MomentState { step, m, v }));
            }
            Some(TrainSnapshot { meta, moments })
        }
        f => return Err(Error::Format(format!("bad training-section flag {f}"))),
    };
    if r.pos != data.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    Ok((state, train))
}

#[cfg(test)]
pub(super) fn decode_bytes(data: &[u8]) -> Result<(ModelState, Option<TrainSnapshot>)> {
    decode(data)
}

#[cfg(test)]
pub(super) fn encode_bytes(state: &ModelState, train: Option<&TrainSnapshot>) -> Result<Vec<u8>> {
    encode(state, train)
}
