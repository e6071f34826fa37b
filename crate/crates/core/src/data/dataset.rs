//! Splits, the on-disk patch file and its JSON manifest.
//!
//! Patch file layout, integers little-endian:
//!
//! ```text
//! magic    8 bytes "CTXPDATA"
//! version  u32
//! n_v, patch_dim, train, val, test   u32 each
//! per sample (train, then val, then test):
//!   seed u64, answer u32, m u32, m × u32 signal index, m × u32 signal class,
//!   q u32, q × u32 query id, n_v × patch_dim × f64 patch values
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{gen_sample_with, Codebook, DataConfig, NeedleSample};
use crate::error::{ensure, Error, Result};
use crate::numerics::{mix_seed, Tensor};

pub const DATA_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CTXPDATA";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn id(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

/// Seed of sample `index` in `split`. Distinct `(split, index)` pairs map to
/// distinct seeds because both steps are bijections on `u64`.
pub fn sample_seed(base: u64, split: Split, index: usize) -> u64 {
    assert!((index as u64) < 1 << 32, "sample index too large");
    mix_seed(mix_seed(base) ^ ((split.id() << 32) | index as u64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub train: Vec<NeedleSample>,
    pub val: Vec<NeedleSample>,
    pub test: Vec<NeedleSample>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[NeedleSample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn gen_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let codebook = Codebook::new(cfg.classes, cfg.patch_dim, cfg.codebook_seed)?;
    let make = |split: Split, count: usize| -> Result<Vec<NeedleSample>> {
        (0..count)
            .map(|i| gen_sample_with(cfg, &codebook, sample_seed(cfg.seed, split, i)))
            .collect()
    };
    Ok(Dataset {
        config: cfg.clone(),
        train: make(Split::Train, cfg.train)?,
        val: make(Split::Val, cfg.val)?,
        test: make(Split::Test, cfg.test)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DataConfig,
    pub patch_file: String,
    pub sha256: String,
}

fn encode(ds: &Dataset) -> Vec<u8> {
    let cfg = &ds.config;
    let mut out = Vec::new();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&DATA_FORMAT_VERSION.to_le_bytes());
    for v in [
        cfg.n_v,
        cfg.patch_dim,
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
    ] {
        u32le(&mut out, v);
    }
    for s in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        out.extend_from_slice(&s.seed.to_le_bytes());
        u32le(&mut out, s.answer);
        u32le(&mut out, s.signal.len());
        for &i in s.signal.iter().chain(&s.signal_classes) {
            u32le(&mut out, i);
        }
        u32le(&mut out, s.query.len());
        for &q in &s.query {
            u32le(&mut out, q);
        }
        for v in s.patches.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(
            self.buf.len() - self.at >= n,
            Error::Format(format!("patch file truncated at byte {}", self.at))
        );
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

fn decode(buf: &[u8], cfg: &DataConfig) -> Result<Dataset> {
    let mut r = Reader { buf, at: 0 };
    ensure!(
        r.take(8)? == MAGIC,
        Error::Format("bad magic; not a patch file".into())
    );
    let version = r.u32()? as u32;
    ensure!(
        version == DATA_FORMAT_VERSION,
        Error::Format(format!("unsupported patch file version {version}"))
    );
    let (n_v, p) = (r.u32()?, r.u32()?);
    ensure!(
        n_v == cfg.n_v && p == cfg.patch_dim,
        Error::Format(format!(
            "patch file holds n_v = {n_v}, patch_dim = {p}; manifest says {}, {}",
            cfg.n_v, cfg.patch_dim
        ))
    );
    let counts = [r.u32()?, r.u32()?, r.u32()?];
    let mut splits: Vec<Vec<NeedleSample>> = Vec::new();
    for count in counts {
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            let seed = r.u64()?;
            let answer = r.u32()?;
            let m = r.u32()?;
            ensure!(
                m <= n_v,
                Error::Format(format!("signal count {m} > n_v {n_v}"))
            );
            let signal = (0..m).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let signal_classes = (0..m).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let q = r.u32()?;
            ensure!(
                q <= 1024,
                Error::Format(format!("implausible query length {q}"))
            );
            let query = (0..q).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let raw = r.take(n_v * p * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            v.push(NeedleSample {
                patches: Tensor::new(vec![n_v, p], data)?,
                signal,
                signal_classes,
                query,
                answer,
                seed,
            });
        }
        splits.push(v);
    }
    ensure!(
        r.at == buf.len(),
        Error::Format("trailing bytes in patch file".into())
    );
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset {
        config: cfg.clone(),
        train,
        val,
        test,
    })
}

fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Writes `manifest.json` and `patches.bin` into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = encode(ds);
    let manifest = DatasetManifest {
        format_version: DATA_FORMAT_VERSION,
        config: ds.config.clone(),
        patch_file: "patches.bin".into(),
        sha256: hex_sha256(&bytes),
    };
    let patch_path = dir.join(&manifest.patch_file);
    fs::write(&patch_path, &bytes).map_err(|e| Error::io(&patch_path, e))?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Reads a dataset directory, checking the patch file against its manifest.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    ensure!(
        manifest.format_version == DATA_FORMAT_VERSION,
        Error::Format(format!(
            "unsupported manifest version {}",
            manifest.format_version
        ))
    );
    manifest.config.validate()?;
    let ppath = dir.join(&manifest.patch_file);
    let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    ensure!(
        hex_sha256(&bytes) == manifest.sha256,
        Error::Format(format!(
            "{} does not match its manifest checksum",
            ppath.display()
        ))
    );
    decode(&bytes, &manifest.config)
}
