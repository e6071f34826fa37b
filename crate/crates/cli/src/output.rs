//! Crash-safe output directories and run manifests.
//!
//! Results are written into `<out>.partial` and renamed to `<out>` only once
//! complete, so a directory without the suffix always holds a finished run.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::fail::{Fail, Kind};

pub const MANIFEST: &str = "run_manifest.json";
pub const CONFIG: &str = "config.toml";
/// Output directory used when `--out` is absent.
pub const OUT_ENV: &str = "CTXPRUNE_OUT";

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    config: &'a C,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

pub struct Staging {
    out: PathBuf,
    partial: PathBuf,
    force: bool,
    inputs: BTreeMap<String, String>,
}

impl Staging {
    pub fn resolve_out(flag: Option<PathBuf>) -> Result<PathBuf, Fail> {
        flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .ok_or_else(|| {
                Fail::new(
                    Kind::Usage,
                    format!("no output directory: pass --out or set {OUT_ENV}"),
                )
            })
    }

    pub fn new(out: PathBuf, force: bool) -> Result<Self> {
        if out.exists() && !force {
            return Err(Fail::new(
                Kind::OutputExists,
                format!("{} exists; pass --force to replace it", out.display()),
            )
            .into());
        }
        let mut name = out
            .file_name()
            .context("output path has no final component")?
            .to_os_string();
        name.push(".partial");
        let partial = out.with_file_name(name);
        if partial.exists() {
            fs::remove_dir_all(&partial)
                .with_context(|| format!("clearing {}", partial.display()))?;
        }
        fs::create_dir_all(&partial).with_context(|| format!("creating {}", partial.display()))?;
        Ok(Staging {
            out,
            partial,
            force,
            inputs: BTreeMap::new(),
        })
    }

    /// Path of a file inside the staging directory.
    pub fn path(&self, name: &str) -> PathBuf {
        self.partial.join(name)
    }

    pub fn dir(&self) -> &Path {
        &self.partial
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Records the digest of an input file, or of every file in an input directory.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        if path.is_dir() {
            let mut names: Vec<_> = fs::read_dir(path)?.collect::<std::io::Result<Vec<_>>>()?;
            names.sort_by_key(|e| e.file_name());
            for e in names {
                if e.path().is_file() {
                    self.inputs
                        .insert(e.path().display().to_string(), sha256_file(&e.path())?);
                }
            }
        } else {
            self.inputs
                .insert(path.display().to_string(), sha256_file(path)?);
        }
        Ok(())
    }

    /// Writes the resolved config and manifest, then moves the run into place.
    pub fn finish<C: Serialize>(self, command: &str, config: &C) -> Result<PathBuf> {
        self.write(
            CONFIG,
            toml::to_string(config).context("serializing config")?,
        )?;
        let mut outputs = BTreeMap::new();
        let mut entries: Vec<_> =
            fs::read_dir(&self.partial)?.collect::<std::io::Result<Vec<_>>>()?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            if e.path().is_file() {
                outputs.insert(
                    e.file_name().to_string_lossy().into_owned(),
                    sha256_file(&e.path())?,
                );
            }
        }
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config,
            inputs: self.inputs.clone(),
            outputs,
        };
        self.write_json(MANIFEST, &manifest)?;
        if self.out.exists() {
            debug_assert!(self.force);
            fs::remove_dir_all(&self.out)
                .with_context(|| format!("removing {}", self.out.display()))?;
        }
        fs::rename(&self.partial, &self.out)
            .with_context(|| format!("moving {} into place", self.partial.display()))?;
        Ok(self.out)
    }
}
