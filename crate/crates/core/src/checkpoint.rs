//! Flat binary parameter archive.
//!
//! Layout (all integers little-endian):
//! `magic[8] version:u32 spec_digest[32] count:u32` followed by `count`
//! entries of `name_len:u32 name dtype:u8 ndim:u32 dims:u64* payload_len:u64 payload`.
//! Batch-norm running statistics are stored as two entries,
//! `<buffer>.mean` and `<buffer>.var`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Element};

pub const MAGIC: &[u8; 8] = b"CBAMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub spec_digest: [u8; 32],
    pub entries: Vec<Entry>,
}

fn le_bytes<T: Element>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * T::DTYPE.size());
    for v in values {
        v.write_le(&mut out);
    }
    out
}

fn digest_bytes(hex: &str) -> [u8; 32] {
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).expect("spec digest is hex");
    }
    out
}

impl Checkpoint {
    pub fn from_model<T: Element>(model: &Model<T>) -> Self {
        let store = model.params();
        let mut entries: Vec<Entry> = store
            .params()
            .iter()
            .map(|p| Entry {
                name: p.name.clone(),
                dtype: T::DTYPE,
                shape: p.value.shape().to_vec(),
                payload: le_bytes(&p.value.data()),
            })
            .collect();
        for b in store.buffers() {
            let stats = b.stats.borrow();
            for (suffix, values) in [("mean", &stats.mean), ("var", &stats.var)] {
                entries.push(Entry {
                    name: format!("{}.{suffix}", b.name),
                    dtype: T::DTYPE,
                    shape: vec![values.len()],
                    payload: le_bytes(values),
                });
            }
        }
        Checkpoint {
            version: FORMAT_VERSION,
            spec_digest: digest_bytes(&model.spec().digest()),
            entries,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.spec_digest);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.tag());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(e.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&e.payload);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let spec_digest: [u8; 32] = r.take(32, "spec digest")?.try_into().unwrap();
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(len, "name")?.to_vec())
                .map_err(|_| Error::Format(format!("entry {i}: name is not utf-8")))?;
            let tag = r.take(1, "dtype")?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Format(format!("entry {name}: unknown dtype tag {tag}")))?;
            let ndim = r.u32("rank")? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64("dimension").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let payload_len = r.u64("payload length")? as usize;
            let expected = shape
                .iter()
                .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("entry {name}: shape {shape:?} overflows")))?;
            if payload_len != expected {
                return Err(Error::Format(format!(
                    "entry {name}: payload length {payload_len} does not match shape {shape:?} ({expected} bytes)"
                )));
            }
            let payload = r.take(payload_len, "payload")?.to_vec();
            entries.push(Entry {
                name,
                dtype,
                shape,
                payload,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            version,
            spec_digest,
            entries,
        })
    }

    /// Copies every entry into `model`, which must match the stored spec
    /// digest and carry exactly the stored names, shapes and dtype.
    pub fn load_into<T: Element>(&self, model: &Model<T>) -> Result<()> {
        let expected = model.spec().digest();
        let found = super::backbone::spec::hex(&self.spec_digest);
        if found != expected {
            return Err(Error::DigestMismatch { expected, found });
        }
        let mut targets: Vec<(String, Vec<usize>, Box<dyn Fn(&[T]) + '_>)> = Vec::new();
        let store = model.params();
        for p in store.params() {
            let v = &p.value;
            targets.push((
                p.name.clone(),
                v.shape().to_vec(),
                Box::new(move |src| v.update_data(|d| d.copy_from_slice(src))),
            ));
        }
        for b in store.buffers() {
            let c = b.stats.borrow().mean.len();
            let s = &b.stats;
            targets.push((
                format!("{}.mean", b.name),
                vec![c],
                Box::new(move |src| s.borrow_mut().mean.copy_from_slice(src)),
            ));
            targets.push((
                format!("{}.var", b.name),
                vec![c],
                Box::new(move |src| s.borrow_mut().var.copy_from_slice(src)),
            ));
        }
        if targets.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} entries, model expects {}",
                self.entries.len(),
                targets.len()
            )));
        }
        let mut decoded = Vec::with_capacity(targets.len());
        for ((name, shape, _), e) in targets.iter().zip(&self.entries) {
            if &e.name != name || &e.shape != shape || e.dtype != T::DTYPE {
                return Err(Error::Format(format!(
                    "entry {} ({:?}, {:?}) does not match model tensor {name} ({shape:?}, {:?})",
                    e.name,
                    e.shape,
                    e.dtype,
                    T::DTYPE
                )));
            }
            decoded.push(e.payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect::<Vec<T>>());
        }
        for ((_, _, write), values) in targets.iter().zip(&decoded) {
            write(values);
        }
        Ok(())
    }
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
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn save<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, Checkpoint::from_model(model).encode()).map_err(|e| Error::io(path, e))
}

/// Builds a fresh model for `spec` and fills it from the archive at `path`.
pub fn restore<T: Element>(path: &Path, spec: &ModelSpec) -> Result<Model<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let model = Model::new(spec, 0)?;
    Checkpoint::decode(&bytes)?.load_into(&model)?;
    Ok(model)
}

/// Hex SHA-256 over every parameter's name and little-endian payload.
pub fn parameter_digest<T: Element>(store: &ParamStore<T>) -> String {
    let mut h = Sha256::new();
    for p in store.params() {
        h.update((p.name.len() as u32).to_le_bytes());
        h.update(p.name.as_bytes());
        h.update(le_bytes(&p.value.data()));
    }
    super::backbone::spec::hex(&h.finalize())
}
