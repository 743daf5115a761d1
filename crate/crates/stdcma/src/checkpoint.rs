//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "STDCMA01"                       magic, 8 bytes
//! u32 version                      currently 1
//! u32 len, [u8; len]               network configuration as `key = value` text
//! u32 count                        number of tensor records
//! count × {
//!     u32 len, [u8; len]           tensor name, UTF-8
//!     u32 rank, u64 × rank         extents
//!     f64 × product(extents)       values
//! }
//! u64                              FNV-1a 64 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use stdcma_core::network::{parse_key_values, NetworkConfig, NetworkParams};
use stdcma_core::Tensor;

use crate::error::AppError;

pub const MAGIC: &[u8; 8] = b"STDCMA01";
pub const VERSION: u32 = 1;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("field fits in u32").to_le_bytes());
}

pub fn encode(params: &NetworkParams) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = params.config.to_text();
    put_u32(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, params.tensors.len());
    for (name, t) in &params.tensors {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, 4);
        for e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("record runs past the end of the file at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, String> {
        let n = self.u32()?;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| format!("invalid UTF-8 at byte {at}"))
    }
}

fn decode_inner(bytes: &[u8]) -> Result<NetworkParams, String> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err("bad magic, not a checkpoint".into());
    }
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err("file too short".into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let actual = fnv1a64(body);
    if stored != actual {
        return Err(format!("checksum mismatch: stored {stored:016x}, computed {actual:016x}"));
    }
    let mut r = Reader { bytes: body, pos: MAGIC.len() };
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(format!("unknown checkpoint version {version}"));
    }
    let text = r.string()?;
    let pairs = parse_key_values(&text).map_err(|e| e.to_string())?;
    let config = NetworkConfig::from_pairs(&pairs, NetworkConfig::toy(2)).map_err(|e| e.to_string())?;
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        if !(1..=4).contains(&rank) {
            return Err(format!("tensor `{name}` has rank {rank}"));
        }
        let mut shape = [1usize; 4];
        for i in 0..rank {
            shape[4 - rank + i] = usize::try_from(r.u64()?).map_err(|_| format!("tensor `{name}` too large"))?;
        }
        let len = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or("tensor extent overflow")?;
        let raw = r.take(len.checked_mul(8).ok_or("tensor extent overflow")?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(format!("duplicate tensor `{name}`"));
        }
    }
    if r.pos != body.len() {
        return Err(format!("{} unexpected bytes after the last record", body.len() - r.pos));
    }
    let params = NetworkParams { config, tensors };
    params.validate().map_err(|e| e.to_string())?;
    Ok(params)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<NetworkParams, AppError> {
    decode_inner(bytes).map_err(|message| AppError::Checkpoint { path: path.to_path_buf(), message })
}

pub fn save_checkpoint(path: &Path, params: &NetworkParams) -> Result<(), AppError> {
    std::fs::write(path, encode(params)).map_err(|e| AppError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams, AppError> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode(&bytes, path)
}
