//! Named-tensor container.
//!
//! Layout: `b"OMNH"`, `u32` version, `u32` count, then per tensor
//! `u32` name length, UTF-8 name, `u8` dtype (0 = f32), `u32` rank, `u64` dims,
//! `u64` payload offset; then every payload as little-endian f32. Offsets are
//! relative to the start of the payload region. All integers little-endian.

use std::fs;
use std::path::Path;

use crate::substrate::Tensor;

use super::params::ParamStore;
use super::ModelError;

pub const MAGIC: &[u8; 4] = b"OMNH";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    head.extend_from_slice(&(store.len() as u32).to_le_bytes());
    let mut payload = Vec::new();
    for (name, t) in store.iter() {
        head.extend_from_slice(&(name.len() as u32).to_le_bytes());
        head.extend_from_slice(name.as_bytes());
        head.push(DTYPE_F32);
        head.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            head.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        head.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        payload.extend_from_slice(&t.to_le_bytes());
    }
    head.extend_from_slice(&payload);
    head
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.at + n > self.buf.len() {
            return Err(ModelError::Checkpoint(format!("truncated at byte {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ParamStore, ModelError> {
    let mut r = Reader { buf, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {}", version)));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| ModelError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(ModelError::Checkpoint(format!("{}: dtype code {}", name, dtype)));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let offset = r.u64()? as usize;
        entries.push((name, shape, offset));
    }
    let payload = &buf[r.at..];
    let mut store = ParamStore::new();
    for (name, shape, offset) in entries {
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        if end > payload.len() {
            return Err(ModelError::Checkpoint(format!("{}: payload out of range", name)));
        }
        let data = payload[offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<(), ModelError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore, ModelError> {
    decode_checkpoint(&fs::read(path)?)
}
