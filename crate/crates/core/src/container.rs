//! Named-tensor container used for checkpoints and dataset files.
//!
//! Layout, all integers little-endian `u64`:
//!
//! ```text
//! magic        8 bytes  ("H2TCKPT1" or "H2TTENS1")
//! count        u64
//! per tensor:
//!   name_len   u64
//!   name       name_len bytes of UTF-8
//!   rank       u64
//!   extents    rank x u64
//!   data       product(extents) x f32 (little-endian)
//! checksum     32 bytes: SHA-256 of every preceding byte
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{BackboneSpec, ModelState};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"H2TCKPT1";
pub const TENSOR_MAGIC: &[u8; 8] = b"H2TTENS1";

const MAX_RANK: u64 = 8;
const MAX_NAME: u64 = 4096;

pub fn encode(magic: &[u8; 8], tensors: &[(String, Tensor)]) -> Vec<u8> {
    let payload: usize = tensors
        .iter()
        .map(|(n, t)| 16 + n.len() + 8 * t.rank() + 4 * t.numel())
        .sum();
    let mut out = Vec::with_capacity(8 + 8 + payload + 32);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} available",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let found = cur.take(8, "magic")?;
    if found != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let count = cur.u64("tensor count")?;
    let mut tensors = Vec::new();
    for i in 0..count {
        let name_len = cur.u64("name length")?;
        if name_len > MAX_NAME {
            return Err(Error::invalid(
                "container",
                format!("tensor {i}: name length {name_len}"),
            ));
        }
        let name = std::str::from_utf8(cur.take(name_len as usize, "name")?)
            .map_err(|_| Error::invalid("container", format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = cur.u64("rank")?;
        if rank > MAX_RANK {
            return Err(Error::invalid("container", format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(cur.u64("extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::invalid("container", format!("{name}: extents overflow")))?;
        let raw = cur.take(numel, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let body_end = cur.pos;
    let stored = cur.take(32, "checksum")?;
    if cur.pos != bytes.len() {
        return Err(Error::invalid(
            "container",
            format!("{} trailing bytes after checksum", bytes.len() - cur.pos),
        ));
    }
    let computed = Sha256::digest(&bytes[..body_end]);
    if computed.as_slice() != stored {
        return Err(Error::ChecksumMismatch {
            stored: hex::encode(stored),
            computed: hex::encode(computed),
        });
    }
    Ok(tensors)
}

pub fn write_file(path: &Path, magic: &[u8; 8], tensors: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode(magic, tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path, magic: &[u8; 8]) -> Result<Vec<(String, Tensor)>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(magic, &bytes)
}

pub fn save_checkpoint(path: &Path, model: &ModelState) -> Result<()> {
    write_file(path, CHECKPOINT_MAGIC, &model.named_tensors())
}

pub fn load_checkpoint(path: &Path, spec: BackboneSpec) -> Result<ModelState> {
    ModelState::from_named(spec, read_file(path, CHECKPOINT_MAGIC)?)
}
