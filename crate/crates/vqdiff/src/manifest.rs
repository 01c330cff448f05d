//! Run manifest: `key = value` lines in sorted order, merged across stages.
//!
//! Keys in use: `config.sha256`, `<file>.sha256` for checkpoints and data,
//! `metric.<name>` for scalar results, and `generated.<file>` mapping each
//! generated piece to its requested style.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const FILE_NAME: &str = "manifest.txt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join(FILE_NAME)
    }

    /// The manifest in `out_dir`, or an empty one if there is none yet.
    pub fn open(out_dir: &Path) -> Result<Self> {
        let path = Self::path(out_dir);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Self::default()),
            Err(e) => return Err(Error::io(&path)(e)),
        };
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::format(&path, format!("line {}: expected key = value", n + 1)))?;
            entries.insert(k.to_owned(), v.to_owned());
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn record_config(&mut self, cfg: &RunConfig) {
        self.set("config.sha256", cfg.hash());
    }

    /// Records the SHA-256 of a file under `<name>.sha256`.
    pub fn record_file(&mut self, name: &str, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        self.set(format!("{name}.sha256"), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    /// Drops every key starting with `prefix`.
    pub fn clear_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let path = Self::path(out_dir);
        let text: String = self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        std::fs::write(&path, text).map_err(Error::io(&path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::open(dir.path()).unwrap();
        assert!(m.entries.is_empty());
        m.record_config(&RunConfig::default());
        std::fs::write(dir.path().join("x.bin"), b"abc").unwrap();
        m.record_file("x.bin", &dir.path().join("x.bin")).unwrap();
        m.set("generated.a.mid", 1);
        m.set("generated.b.mid", 0);
        m.save(dir.path()).unwrap();
        let mut back = Manifest::open(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(
            back.get("x.bin.sha256"),
            Some("ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad")
        );
        back.clear_prefix("generated.");
        assert_eq!(back.entries.len(), 2);
    }
}
