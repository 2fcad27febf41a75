//! Single-file volume container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "OCTVOL\0\0"
//! version    u32      1
//! header_len u32
//! header     JSON     {id, domain, height, width, count, dtype, range, has_masks}
//! planes     count × height × width samples of `dtype` (u8 or f32)
//! masks      count × height × width u8 labels, when has_masks
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Domain, ImageTensor, RangeTag, SegMask, Volume};
use crate::error::{format, Error, Result};

pub const VOLUME_MAGIC: &[u8; 8] = b"OCTVOL\0\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    U8,
    F32,
}

#[derive(Serialize, Deserialize, Debug)]
struct Header {
    id: String,
    domain: Domain,
    height: usize,
    width: usize,
    count: usize,
    dtype: Dtype,
    range: RangeTag,
    has_masks: bool,
}

pub fn save_volume(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    fs::write(path, encode(vol)?)?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode(&fs::read(path)?)
}

fn encode(vol: &Volume) -> Result<Vec<u8>> {
    let (height, width) = vol.dims();
    let range = vol.bscans()[0].range();
    if vol.bscans().iter().any(|b| b.range() != range) {
        return Err(format("mixed value ranges within one volume"));
    }
    let dtype = match range {
        RangeTag::RawU8 => Dtype::U8,
        RangeTag::Norm => Dtype::F32,
    };
    let header = Header {
        id: vol.id.clone(),
        domain: vol.domain,
        height,
        width,
        count: vol.len(),
        dtype,
        range,
        has_masks: vol.masks().is_some(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + vol.len() * height * width * 5);
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for b in vol.bscans() {
        match dtype {
            Dtype::U8 => out.extend(b.values().iter().map(|&v| v as u8)),
            Dtype::F32 => b
                .values()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    if let Some(masks) = vol.masks() {
        for m in masks {
            out.extend_from_slice(m.labels());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                format(format!(
                    "truncated container: need {n} bytes at offset {}",
                    self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode(buf: &[u8]) -> Result<Volume> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != VOLUME_MAGIC {
        return Err(format("not a volume container (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format(format!("unsupported container version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| format(format!("corrupt header: {e}")))?;
    let plane = header
        .height
        .checked_mul(header.width)
        .ok_or_else(|| format("header dimensions overflow"))?;
    let expected_range = match header.dtype {
        Dtype::U8 => RangeTag::RawU8,
        Dtype::F32 => RangeTag::Norm,
    };
    if header.range != expected_range {
        return Err(format("dtype and range tag disagree"));
    }
    let mut bscans = Vec::with_capacity(header.count);
    for _ in 0..header.count {
        let values: Vec<f32> = match header.dtype {
            Dtype::U8 => r.take(plane)?.iter().map(|&b| b as f32).collect(),
            Dtype::F32 => r
                .take(plane * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        bscans.push(
            ImageTensor::new(header.height, header.width, values, header.range)
                .map_err(as_format)?,
        );
    }
    let masks = if header.has_masks {
        let mut masks = Vec::with_capacity(header.count);
        for _ in 0..header.count {
            let labels = r.take(plane)?.to_vec();
            masks.push(SegMask::new(header.height, header.width, labels).map_err(as_format)?);
        }
        Some(masks)
    } else {
        None
    };
    if r.pos != buf.len() {
        return Err(format(format!(
            "{} trailing bytes after declared planes (mask/B-scan count mismatch?)",
            buf.len() - r.pos
        )));
    }
    Volume::new(header.id, header.domain, bscans, masks).map_err(as_format)
}

fn as_format(e: Error) -> Error {
    match e {
        Error::Contract(m) => Error::Format(m),
        other => other,
    }
}
