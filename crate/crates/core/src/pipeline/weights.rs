//! Weight files: `"RMW1"`, a `u32` format version, a length-prefixed JSON
//! model config, a named-tensor table and a CRC32 of everything before it.
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor2;

pub const WEIGHTS_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RMW1";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, WEIGHTS_VERSION);
    let config = serde_json::to_vec(&params.config).expect("model config serializes");
    put_u32(&mut out, config.len() as u32);
    out.extend_from_slice(&config);
    put_u32(&mut out, params.store.len() as u32);
    for p in params.store.iter() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.rows() as u32);
        put_u32(&mut out, p.value.cols() as u32);
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

pub fn save_weights(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Weights {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

struct RawWeights {
    config: ModelConfig,
    tensors: Vec<(String, Tensor2)>,
}

fn decode(path: &Path, bytes: &[u8]) -> Result<RawWeights> {
    let mut r = Reader { path, bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail("not a weight file (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != WEIGHTS_VERSION {
        return Err(r.fail(format!(
            "format version {version} is not supported (expected {WEIGHTS_VERSION})"
        )));
    }
    if bytes.len() < 12 {
        return Err(r.fail("truncated before checksum"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(r.fail(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    r.bytes = body;
    let len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| r.fail(format!("bad model config: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "tensor name")?.to_vec())
            .map_err(|_| r.fail("tensor name is not UTF-8"))?;
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let raw = r.take(rows * cols * 8, &format!("tensor `{name}`"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor2::from_vec(rows, cols, data)?));
    }
    if r.pos != body.len() {
        return Err(r.fail(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(RawWeights { config, tensors })
}

fn read(path: &Path) -> Result<RawWeights> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

/// Loads a model with the config stored in the file.
pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let raw = read(path)?;
    let config = raw.config.clone();
    install(path, raw, &config)
}

/// Loads the stored tensors into a model built from `config`. Any tensor
/// whose shape differs is reported by name.
pub fn load_weights_as(path: impl AsRef<Path>, config: &ModelConfig) -> Result<ModelParams> {
    let path = path.as_ref();
    install(path, read(path)?, config)
}

fn install(path: &Path, raw: RawWeights, config: &ModelConfig) -> Result<ModelParams> {
    let mut params = ModelParams::new(config)?;
    let fail = |reason: String| Error::Weights {
        path: path.to_path_buf(),
        reason,
    };
    let mut seen = vec![false; params.store.len()];
    for (name, t) in raw.tensors {
        let id = params
            .store
            .find(&name)
            .ok_or_else(|| fail(format!("unexpected tensor `{name}`")))?;
        let slot = params.store.value_mut(id);
        if slot.shape() != t.shape() {
            return Err(Error::TensorShape {
                name,
                expected: slot.shape(),
                found: t.shape(),
            });
        }
        *slot = t;
        seen[id.index()] = true;
    }
    if let Some(k) = seen.iter().position(|s| !s) {
        let id = params.store.ids().nth(k).expect("index in range");
        return Err(fail(format!("missing tensor `{}`", params.store.name(id))));
    }
    Ok(params)
}
