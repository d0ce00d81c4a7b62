//! Run manifests: what a command read, what it wrote, and the hashes that
//! tie them together.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

use super::canon::{canonical_json, canonical_json_pretty, sha256_hex};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".mope.lock";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: Value,
    /// Input name → content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output file name → content hash.
    pub outputs: BTreeMap<String, String>,
    /// Seconds per phase. Not part of [`RunManifest::content_hash`].
    pub wall_time_s: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            ..Self::default()
        }
    }

    /// Hash of everything except wall times: equal for reruns that produced
    /// identical artifacts.
    pub fn content_hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Value::Object(m) = &mut v {
            m.remove("wall_time_s");
        }
        Ok(sha256_hex(canonical_json(&v)?.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Recomputes the hash of every recorded output under `dir` and lists
    /// the ones that differ or are missing.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let mut gaps = Vec::new();
        for (name, declared) in &self.outputs {
            match fs::read(dir.join(name)) {
                Ok(bytes) => {
                    let found = sha256_hex(&bytes);
                    if &found != declared {
                        gaps.push(format!("{name}: hash {found}, manifest says {declared}"));
                    }
                }
                Err(_) => gaps.push(format!("{name}: missing")),
            }
        }
        if gaps.is_empty() {
            Ok(())
        } else {
            Err(Error::Report(gaps))
        }
    }
}

/// Output directory owned by one command at a time. Files written through
/// it are hashed into the manifest; the lock is released on drop.
pub struct ArtifactDir {
    dir: PathBuf,
    lock: PathBuf,
    pub manifest: RunManifest,
}

impl ArtifactDir {
    pub fn open(dir: &Path, manifest: RunManifest) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lock = dir.join(LOCK_FILE);
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::Usage(format!("{} is locked by another run ({LOCK_FILE} exists)", dir.display()))
                } else {
                    Error::io(&lock, e)
                }
            })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            lock,
            manifest,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.manifest.outputs.insert(name.into(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        self.write(name, canonical_json_pretty(value)?.as_bytes())
    }

    pub fn input(&mut self, name: &str, hash: String) {
        self.manifest.inputs.insert(name.into(), hash);
    }

    pub fn time(&mut self, phase: &str, seconds: f64) {
        self.manifest.wall_time_s.insert(phase.into(), seconds);
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        let m = self.manifest.clone();
        let path = self.path(MANIFEST_FILE);
        let text = canonical_json_pretty(&m)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.release();
        Ok(m)
    }

    fn release(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

impl Drop for ArtifactDir {
    fn drop(&mut self) {
        self.release();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wall_times_do_not_change_the_content_hash() {
        let mut a = RunManifest::new("eval", Value::Null);
        a.outputs.insert("x".into(), "00".into());
        let mut b = a.clone();
        a.wall_time_s.insert("total".into(), 1.0);
        b.wall_time_s.insert("total".into(), 2.5);
        assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
        b.outputs.insert("y".into(), "11".into());
        assert_ne!(a.content_hash().unwrap(), b.content_hash().unwrap());
    }

    #[test]
    fn second_writer_is_refused() {
        let tmp = tempfile::tempdir().unwrap();
        let first = ArtifactDir::open(tmp.path(), RunManifest::default()).unwrap();
        assert!(matches!(
            ArtifactDir::open(tmp.path(), RunManifest::default()),
            Err(Error::Usage(_))
        ));
        drop(first);
        assert!(ArtifactDir::open(tmp.path(), RunManifest::default()).is_ok());
    }
}
