//! Versioned little-endian parameter files.
//!
//! ```text
//! magic[4] | u32 version | u32 meta_len | meta (UTF-8 JSON)
//! u32 count | count × { u32 name_len | name | u32 ndim | ndim × u32 | f32 × numel }
//! ```
//!
//! Model checkpoints use magic `EGMB` and embed the model config as meta;
//! optimizer state files use `EGMS`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::model::{EegMamba, EegMambaConfig};
use crate::tensor::{Element, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EGMB";
pub const STATE_MAGIC: [u8; 4] = *b"EGMS";
pub const FORMAT_VERSION: u32 = 1;

/// A named f32 array.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_container<W: Write>(mut w: W, magic: [u8; 4], meta: &str, arrays: &[NamedArray]) -> Result<()> {
    w.write_all(&magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for a in arrays {
        w.write_all(&(a.name.len() as u32).to_le_bytes())?;
        w.write_all(a.name.as_bytes())?;
        w.write_all(&(a.shape.len() as u32).to_le_bytes())?;
        for &d in &a.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &a.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Byte reader that reports the offset of any failure.
pub(crate) struct Cursor<R> {
    inner: R,
    pub offset: u64,
}

impl<R: Read> Cursor<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset,
            msg: msg.into(),
        }
    }

    pub fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        let got = (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if got < n {
            return Err(Error::Format {
                offset: self.offset + got as u64,
                msg: format!("truncated while reading {what}: wanted {n} bytes, found {got}"),
            });
        }
        self.offset += n as u64;
        Ok(buf)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.bytes(4, what)?;
        Ok(f32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let start = self.offset;
        let b = self.bytes(len, what)?;
        String::from_utf8(b).map_err(|_| Error::Format {
            offset: start,
            msg: format!("{what} is not valid UTF-8"),
        })
    }

    pub fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let m = self.bytes(4, "magic")?;
        if m != expected {
            return Err(Error::Format {
                offset: 0,
                msg: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&m),
                    String::from_utf8_lossy(&expected)
                ),
            });
        }
        Ok(())
    }

    pub fn version(&mut self, supported: u32) -> Result<()> {
        let at = self.offset;
        let v = self.u32("version")?;
        if v != supported {
            return Err(Error::Format {
                offset: at,
                msg: format!("unsupported version {v}, this build reads version {supported}"),
            });
        }
        Ok(())
    }
}

/// Upper bound on a single array, guarding against corrupt headers.
const MAX_ELEMENTS: u64 = 1 << 31;

pub fn read_container<R: Read>(r: R, magic: [u8; 4]) -> Result<(String, Vec<NamedArray>)> {
    let mut c = Cursor::new(r);
    c.magic(magic)?;
    c.version(FORMAT_VERSION)?;
    let meta_len = c.u32("meta length")? as usize;
    let meta = c.string(meta_len, "meta")?;
    let count = c.u32("array count")?;
    let mut arrays = Vec::new();
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name = c.string(name_len, "array name")?;
        let ndim = c.u32("rank")? as usize;
        if ndim > 8 {
            return Err(c.fail(format!("array {name} has implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: u64 = 1;
        for _ in 0..ndim {
            let d = c.u32("dimension")? as u64;
            numel = numel.saturating_mul(d);
            shape.push(d as usize);
        }
        if numel > MAX_ELEMENTS {
            return Err(c.fail(format!("array {name} claims {numel} elements")));
        }
        let raw = c.bytes(numel as usize * 4, &format!("data of {name}"))?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        arrays.push(NamedArray { name, shape, data });
    }
    let mut rest = [0u8; 1];
    if c.inner.read(&mut rest)? != 0 {
        return Err(c.fail("trailing bytes after last array"));
    }
    Ok((meta, arrays))
}

pub fn store_arrays<E: Element>(store: &ParamStore<E>) -> Vec<NamedArray> {
    store
        .iter()
        .map(|(_, name, t)| NamedArray {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.f64() as f32).collect(),
        })
        .collect()
}

/// Overwrite every parameter of `store` from `arrays`, matched by name and
/// shape. Fails without modifying `store` on any mismatch.
pub fn fill_store<E: Element>(store: &mut ParamStore<E>, arrays: &[NamedArray]) -> Result<()> {
    if arrays.len() != store.len() {
        return Err(Error::ConfigMismatch(format!(
            "file holds {} arrays, model has {} parameters",
            arrays.len(),
            store.len()
        )));
    }
    let mut plan = Vec::with_capacity(arrays.len());
    for a in arrays {
        let id = store
            .id_of(&a.name)
            .ok_or_else(|| Error::ConfigMismatch(format!("unexpected parameter {}", a.name)))?;
        if store.get(id).shape() != a.shape.as_slice() {
            return Err(Error::ConfigMismatch(format!(
                "parameter {} has shape {:?} in file, {:?} in model",
                a.name,
                a.shape,
                store.get(id).shape()
            )));
        }
        plan.push((id, a));
    }
    for (id, a) in plan {
        let t = store.get_mut(id);
        for (dst, &v) in t.data_mut().iter_mut().zip(&a.data) {
            *dst = E::of(v as f64);
        }
    }
    Ok(())
}

pub fn save_checkpoint<E: Element>(path: &Path, cfg: &EegMambaConfig, store: &ParamStore<E>) -> Result<()> {
    let meta = serde_json::to_string(cfg)?;
    let w = BufWriter::new(File::create(path)?);
    write_container(w, CHECKPOINT_MAGIC, &meta, &store_arrays(store))
}

/// Rebuild a model from a checkpoint file.
pub fn load_checkpoint<E: Element>(path: &Path) -> Result<(EegMamba, ParamStore<E>)> {
    let (meta, arrays) = read_container(BufReader::new(File::open(path)?), CHECKPOINT_MAGIC)?;
    let cfg = EegMambaConfig::from_json(&meta)?;
    let (model, mut store) = EegMamba::build::<E, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    fill_store(&mut store, &arrays)?;
    Ok((model, store))
}

/// Load a checkpoint that must have been written for exactly `expected`.
pub fn load_checkpoint_for<E: Element>(path: &Path, expected: &EegMambaConfig) -> Result<(EegMamba, ParamStore<E>)> {
    let (meta, arrays) = read_container(BufReader::new(File::open(path)?), CHECKPOINT_MAGIC)?;
    let cfg = EegMambaConfig::from_json(&meta)?;
    if &cfg != expected {
        return Err(Error::ConfigMismatch(
            "checkpoint was written for a different model configuration".into(),
        ));
    }
    let (model, mut store) = EegMamba::build::<E, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    fill_store(&mut store, &arrays)?;
    Ok((model, store))
}

pub fn arrays_to_tensors<E: Element>(arrays: &[NamedArray]) -> Result<Vec<(String, Tensor<E>)>> {
    arrays
        .iter()
        .map(|a| {
            let data = a.data.iter().map(|&v| E::of(v as f64)).collect();
            Ok((a.name.clone(), Tensor::new(a.shape.clone(), data)?))
        })
        .collect()
}
