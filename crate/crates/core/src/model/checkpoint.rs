//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "PVECCKPT"
//! version  u32      1
//! config   u64 length + UTF-8 JSON of the model config
//! count    u64      number of tensors
//! tensor   u8 kind (0 parameter, 1 buffer)
//!          u32 name length + UTF-8 name
//!          u32 rank, rank × u64 dims
//!          numel × f64 bits
//! crc32    u32      over every preceding byte
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::nnops::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"PVECCKPT";
const VERSION: u32 = 1;
const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;

/// A model configuration with its parameters and buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub store: ParamStore,
}

pub fn write_checkpoint(mut w: impl Write, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(&ckpt.config)
        .map_err(|e| Error::Checkpoint(format!("cannot encode config: {e}")))?;
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let tensors: Vec<(u8, &String, &Tensor)> = ckpt
        .store
        .params()
        .map(|(n, t)| (KIND_PARAM, n, t))
        .chain(ckpt.store.buffers().map(|(n, t)| (KIND_BUFFER, n, t)))
        .collect();
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (kind, name, t) in tensors {
        buf.push(kind);
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    w.write_all(&buf)
        .map_err(|e| Error::Checkpoint(format!("write failed: {e}")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {v}")))
    }
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(format!("read failed: {e}")))?;
    if bytes.len() < MAGIC.len() + 4 + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut c = Cursor { bytes: body, at: MAGIC.len() };
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = c.len()?;
    let config: ModelConfig = serde_json::from_slice(c.take(n)?)
        .map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
    let count = c.len()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let kind = c.u8()?;
        let n = c.u32()? as usize;
        let name = String::from_utf8(c.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.saturating_mul(8) <= body.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible shape {shape:?} for `{name}`")))?;
        let data = c
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_bits(u64::from_le_bytes(b.try_into().expect("8 bytes"))))
            .collect();
        let t = Tensor::new(shape, data)?;
        match kind {
            KIND_PARAM => store.insert(name, t),
            KIND_BUFFER => store.insert_buffer(name, t),
            k => return Err(Error::Checkpoint(format!("unknown tensor kind {k}"))),
        }
    }
    if c.at != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok(Checkpoint { config, store })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes[..])
}
