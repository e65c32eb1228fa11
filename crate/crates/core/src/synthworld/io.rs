//! Binary record files.
//!
//! Layout, all integers little-endian:
//! `FREC` magic, u16 version, u32 record count, then per record:
//! u16 T, u16 N, u16 prompt length, prompt ids (u16 each),
//! T*N presence bytes, T*N*4 u16 box ids, N u16 description ids,
//! per slot: u8 crop flag (0 none, 1 crop, 2 fallback crop) and, when a crop
//! is present, u16 rows, u16 cols, rows*cols bytes,
//! then u32 byte length followed by an `FCLP` clip.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::conditioning::PromptTokens;
use crate::error::{Error, Result};
use crate::tokenizer::{Frame, VideoClip};

use super::{DatasetRecord, PAD};

const MAGIC: &[u8; 4] = b"FREC";
const VERSION: u16 = 1;

fn u16_of(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u16")))
}

fn encode_record(rec: &DatasetRecord, out: &mut Vec<u8>) -> Result<()> {
    let put16 = |out: &mut Vec<u8>, v: usize, what: &str| -> Result<()> {
        out.extend_from_slice(&u16_of(v, what)?.to_le_bytes());
        Ok(())
    };
    put16(out, rec.timesteps, "timesteps")?;
    put16(out, rec.slots, "slots")?;
    put16(out, rec.prompt.len(), "prompt length")?;
    for &id in rec.prompt.ids() {
        put16(out, id, "prompt id")?;
    }
    out.extend(rec.presence.iter().map(|&p| p as u8));
    for b in &rec.boxes {
        for &v in b {
            put16(out, v, "box id")?;
        }
    }
    for &d in &rec.descriptions {
        put16(out, d, "description id")?;
    }
    for (crop, &fallback) in rec.crops.iter().zip(&rec.crop_fallback) {
        match crop {
            None => out.push(0),
            Some(f) => {
                out.push(if fallback { 2 } else { 1 });
                put16(out, f.height(), "crop rows")?;
                put16(out, f.width(), "crop cols")?;
                out.extend_from_slice(f.cells());
            }
        }
    }
    let clip = rec.clip.to_bytes();
    out.extend_from_slice(&(clip.len() as u32).to_le_bytes());
    out.extend_from_slice(&clip);
    Ok(())
}

pub fn write_records(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        encode_record(r, &mut buf)?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format(format!(
                "record file truncated at byte {}",
                self.pos
            )));
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
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

fn decode_record(c: &mut Cursor<'_>) -> Result<DatasetRecord> {
    let timesteps = c.u16()?;
    let slots = c.u16()?;
    let plen = c.u16()?;
    let ids = (0..plen).map(|_| c.u16()).collect::<Result<Vec<_>>>()?;
    let prompt = PromptTokens::new(ids, plen, PAD)?;
    let cells = timesteps * slots;
    let presence = c.take(cells)?.iter().map(|&b| b != 0).collect();
    let boxes = (0..cells)
        .map(|_| Ok([c.u16()?, c.u16()?, c.u16()?, c.u16()?]))
        .collect::<Result<Vec<_>>>()?;
    let descriptions = (0..slots).map(|_| c.u16()).collect::<Result<Vec<_>>>()?;
    let mut crops = Vec::with_capacity(slots);
    let mut crop_fallback = Vec::with_capacity(slots);
    for _ in 0..slots {
        match c.u8()? {
            0 => {
                crops.push(None);
                crop_fallback.push(false);
            }
            flag @ (1 | 2) => {
                let rows = c.u16()?;
                let cols = c.u16()?;
                let data = c.take(rows * cols)?.to_vec();
                crops.push(Some(Frame::new(rows, cols, data)?));
                crop_fallback.push(flag == 2);
            }
            other => return Err(Error::Format(format!("bad crop flag {other}"))),
        }
    }
    let n = c.u32()?;
    let clip = VideoClip::read_from(c.take(n)?)?;
    Ok(DatasetRecord {
        prompt,
        timesteps,
        slots,
        presence,
        boxes,
        descriptions,
        crops,
        crop_fallback,
        clip,
    })
}

pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut data)
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { data: &data, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a record file".into()));
    }
    let version = c.u16()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported record version {version}")));
    }
    let count = c.u32()?;
    let records = (0..count)
        .map(|_| decode_record(&mut c))
        .collect::<Result<Vec<_>>>()?;
    if c.pos != data.len() {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(records)
}
