//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "RSEGCKPT"
//! version    u32
//! step       u64
//! metadata   u32 count, then count × (string key, string value)
//! manifest   u32 count, then count × (string name, u8 kind, 4 × u32 shape)
//! data       f32 values of every tensor, manifest order, row-major
//! ```
//!
//! A string is a `u32` byte length followed by UTF-8 bytes. `kind` is 0 for
//! trainable tensors and 1 for buffers. The data section must end exactly at
//! the end of the input.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{ParamEntry, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// Free-form key/value pairs, typically the configuration that built the
    /// network.
    pub metadata: Vec<(String, String)>,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn metadata(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    put_u32(&mut out, ckpt.metadata.len() as u32);
    for (k, v) in &ckpt.metadata {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    let entries = ckpt.store.entries();
    put_u32(&mut out, entries.len() as u32);
    for e in entries {
        put_str(&mut out, &e.name);
        out.push(match e.kind {
            ParamKind::Trainable => 0,
            ParamKind::Buffer => 1,
        });
        for d in e.value.shape() {
            put_u32(&mut out, d as u32);
        }
    }
    for e in entries {
        for &v in e.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("truncated while reading {what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(format!("{what} is not valid UTF-8")))
    }
}

/// Parses a checkpoint; nothing is returned unless the whole input is valid.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        });
    }
    let step = r.u64("step")?;
    let n_meta = r.u32("metadata count")? as usize;
    let mut metadata = Vec::new();
    for _ in 0..n_meta {
        let k = r.string("metadata key")?;
        let v = r.string("metadata value")?;
        metadata.push((k, v));
    }
    let n = r.u32("manifest count")? as usize;
    let mut manifest = Vec::new();
    for _ in 0..n {
        let name = r.string("tensor name")?;
        let kind = match r.take(1, "tensor kind")?[0] {
            0 => ParamKind::Trainable,
            1 => ParamKind::Buffer,
            k => return Err(Error::Format(format!("unknown tensor kind {k} for {name}"))),
        };
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32("tensor shape")? as usize;
        }
        manifest.push((name, kind, shape));
    }
    let mut entries = Vec::with_capacity(n);
    for (name, kind, shape) in manifest {
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|l| l.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("shape of {name} overflows")))?;
        let raw = r.take(len, &name)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let value = Tensor::from_vec(shape, values)?;
        entries.push(ParamEntry { name, kind, value });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        step,
        metadata,
        store: ParamStore::from_entries(entries, true),
    })
}
