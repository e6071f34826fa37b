//! Binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "CTXPCKPT"
//! version  u32
//! header   u32 length + UTF-8 TOML (kind, optional init_checksum, [model])
//! count    u32
//! count ×  u32 name length, name, u32 rank, rank × u64 extent, f64 values
//! trailer  8 bytes  "CKPTEND\0"
//! ```
//!
//! A file is parsed completely before any model state is touched.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;

use super::classifier::Classifier;
use super::config::ModelConfig;
use super::lvlm::Lvlm;
use super::params::ParamStore;

const MAGIC: &[u8; 8] = b"CTXPCKPT";
const TRAILER: &[u8; 8] = b"CKPTEND\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    init_checksum: Option<String>,
    model: ModelConfig,
}

struct Parsed {
    header: Header,
    tensors: BTreeMap<String, Tensor>,
}

fn encode(header: &Header, params: &ParamStore) -> Result<Vec<u8>> {
    let text = toml::to_string(header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let mut out = Vec::with_capacity(64 + params.element_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(TRAILER);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        ensure!(
            self.buf.len() - self.at >= n,
            Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.at
            ))
        );
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

fn decode(buf: &[u8]) -> Result<Parsed> {
    let mut r = Reader { buf, at: 0 };
    ensure!(
        r.take(8, "magic")? == MAGIC,
        Error::Checkpoint("bad magic; not a checkpoint file".into())
    );
    let version = r.u32("version")?;
    ensure!(
        version == CHECKPOINT_VERSION,
        Error::Checkpoint(format!(
            "unsupported version {version} (this build reads {CHECKPOINT_VERSION})"
        ))
    );
    let text = r.string("header")?;
    let header: Header =
        toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32("rank")? as usize;
        ensure!(
            rank <= 8,
            Error::CheckpointTensor {
                name: name.clone(),
                reason: format!("implausible rank {rank}")
            }
        );
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len
            .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= buf.len()))
            .ok_or_else(|| Error::CheckpointTensor {
                name: name.clone(),
                reason: format!("shape {shape:?} larger than file"),
            })?;
        let raw = r.take(len * 8, &format!("values of `{name}`"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::CheckpointTensor {
            name: name.clone(),
            reason: e.to_string(),
        })?;
        ensure!(
            tensors.insert(name.clone(), t).is_none(),
            Error::CheckpointTensor {
                name,
                reason: "duplicate record".into()
            }
        );
    }
    ensure!(
        r.take(8, "trailer")? == TRAILER,
        Error::Checkpoint("missing end marker".into())
    );
    ensure!(
        r.at == buf.len(),
        Error::Checkpoint("trailing bytes after end marker".into())
    );
    Ok(Parsed { header, tensors })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path, kind: &str) -> Result<Parsed> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let parsed = decode(&buf)?;
    ensure!(
        parsed.header.kind == kind,
        Error::Checkpoint(format!(
            "expected a {kind} checkpoint, found {}",
            parsed.header.kind
        ))
    );
    parsed.header.model.validate()?;
    Ok(parsed)
}

/// Checks `tensors` against the names and shapes in `expected` and returns
/// the replacement store.
fn conform(expected: &ParamStore, mut tensors: BTreeMap<String, Tensor>) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for (name, want) in expected.iter() {
        let got = tensors
            .remove(name)
            .ok_or_else(|| Error::CheckpointTensor {
                name: name.to_string(),
                reason: "missing from file".into(),
            })?;
        ensure!(
            got.shape() == want.shape(),
            Error::CheckpointTensor {
                name: name.to_string(),
                reason: format!(
                    "file has shape {:?}, model expects {:?}",
                    got.shape(),
                    want.shape()
                )
            }
        );
        out.insert(name, got);
    }
    if let Some(name) = tensors.keys().next() {
        return Err(Error::CheckpointTensor {
            name: name.clone(),
            reason: "unknown to this model".into(),
        });
    }
    Ok(out)
}

pub fn save_lvlm(model: &Lvlm, path: &Path) -> Result<()> {
    let header = Header {
        kind: "lvlm".into(),
        init_checksum: None,
        model: model.config().clone(),
    };
    write_atomic(path, &encode(&header, model.params())?)
}

pub fn save_classifier(model: &Classifier, path: &Path) -> Result<()> {
    let header = Header {
        kind: "classifier".into(),
        init_checksum: Some(model.init_checksum().to_string()),
        model: model.config().clone(),
    };
    write_atomic(path, &encode(&header, model.params())?)
}

/// Loads a model whose configuration is taken from the file header.
pub fn load_lvlm(path: &Path) -> Result<Lvlm> {
    let p = read(path, "lvlm")?;
    let fresh = Lvlm::new(p.header.model.clone(), 0)?;
    let params = conform(fresh.params(), p.tensors)?;
    Ok(Lvlm::from_parts(p.header.model, params))
}

pub fn load_classifier(path: &Path) -> Result<Classifier> {
    let p = read(path, "classifier")?;
    let fresh = Classifier::new(p.header.model.clone(), 0)?;
    let params = conform(fresh.params(), p.tensors)?;
    let init = p
        .header
        .init_checksum
        .ok_or_else(|| Error::Checkpoint("classifier header lacks init_checksum".into()))?;
    Ok(Classifier::from_parts(p.header.model, params, init))
}

impl Lvlm {
    /// Replaces this model's weights; the file must match its configuration.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let p = read(path, "lvlm")?;
        let params = conform(self.params(), p.tensors)?;
        ensure!(
            &p.header.model == self.config(),
            Error::Checkpoint("configuration in file differs from this model".into())
        );
        *self.params_mut() = params;
        Ok(())
    }
}

impl Classifier {
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let loaded = load_classifier(path)?;
        let params = conform(
            self.params(),
            loaded
                .params()
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
        )?;
        ensure!(
            loaded.config() == self.config(),
            Error::Checkpoint("configuration in file differs from this model".into())
        );
        *self = Classifier::from_parts(
            self.config().clone(),
            params,
            loaded.init_checksum().to_string(),
        );
        Ok(())
    }
}
