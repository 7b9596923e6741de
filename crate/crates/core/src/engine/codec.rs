//! Canonical parameter bytes, shared by the serialized transport and model
//! hashing.
//!
//! ```text
//! "BFL1"  u32 tensor_count
//! per tensor: u32 rank, rank x u32 dims, dims.product() x f32
//! ```
//!
//! All integers and floats are little-endian. Floats are copied by bit
//! pattern, so NaN payloads and signed zeros survive a round trip.

use std::sync::Arc;

use crate::tensornet::{Layout, ModelParams};
use crate::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 4] = b"BFL1";

pub fn encoded_len(layout: &Layout) -> usize {
    8 + layout
        .entries()
        .iter()
        .map(|e| 4 + 4 * e.shape.len() + 4 * e.numel())
        .sum::<usize>()
}

pub fn encode_params(params: &ModelParams) -> Vec<u8> {
    let layout = params.layout();
    let mut out = Vec::with_capacity(encoded_len(layout));
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&(layout.entries().len() as u32).to_le_bytes());
    for (i, entry) in layout.entries().iter().enumerate() {
        out.extend_from_slice(&(entry.shape.len() as u32).to_le_bytes());
        for &d in &entry.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in params.tensor(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(format!(
                "parameter bytes end at {} but {} more were expected at offset {}",
                self.bytes.len(),
                n,
                self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes bytes produced by [`encode_params`], checking them against the
/// expected layout.
pub fn decode_params(bytes: &[u8], layout: &Arc<Layout>) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != PARAMS_MAGIC {
        return Err(Error::format("parameter bytes do not start with BFL1"));
    }
    let count = r.u32()? as usize;
    if count != layout.entries().len() {
        return Err(Error::format(format!(
            "encoded {count} tensors, layout has {}",
            layout.entries().len()
        )));
    }
    let mut values = Vec::with_capacity(layout.total());
    for entry in layout.entries() {
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != entry.shape {
            return Err(Error::format(format!(
                "tensor `{}` encoded with shape {dims:?}, layout says {:?}",
                entry.name, entry.shape
            )));
        }
        let raw = r.take(4 * entry.numel())?;
        values.extend(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    ModelParams::new(layout.clone(), values)
}
