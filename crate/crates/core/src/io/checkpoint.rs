use std::path::Path;

use super::{put_f32s, read_bytes, write_bytes, Cursor};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const GSWT_MAGIC: &[u8; 4] = b"GSWT";
pub const GSWT_VERSION: u16 = 1;

/// Header, then until end of file: `u32` name length, UTF-8 name, `u32`
/// rank, `u32` dims, `f32` data.
pub fn encode_checkpoint(records: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(GSWT_MAGIC);
    out.extend_from_slice(&GSWT_VERSION.to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, t.data().iter().copied());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor::new("GSWT", bytes);
    cur.magic(GSWT_MAGIC)?;
    let version = cur.u16("version")?;
    if version != GSWT_VERSION {
        return Err(cur.error(4, format!("unsupported version {version}")));
    }
    let mut records: Vec<(String, Tensor)> = Vec::new();
    while cur.remaining() > 0 {
        let start = cur.pos();
        let len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| cur.error(start + 4, "record name is not UTF-8"))?
            .to_owned();
        if records.iter().any(|(n, _)| *n == name) {
            return Err(cur.error(start, format!("duplicate record `{name}`")));
        }
        let rank = cur.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dimension")? as usize);
        }
        let count = shape.iter().product::<usize>();
        let data = cur.f32s(count, &format!("data of `{name}`"))?;
        let tensor = Tensor::new(shape, data).map_err(|e| match e {
            Error::Format { .. } => e,
            other => cur.error(start, other.to_string()),
        })?;
        records.push((name, tensor));
    }
    Ok(records)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_checkpoint(&read_bytes(path)?)
}

pub fn write_checkpoint(path: &Path, records: &[(String, Tensor)]) -> Result<()> {
    write_bytes(path, &encode_checkpoint(records))
}
