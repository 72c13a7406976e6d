//! Dataset manifest: cached checksums and image counts per dataset root.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DatasetEntry {
    /// sha256 per data file (file name -> hex digest).
    pub files: BTreeMap<String, String>,
    pub train_count: usize,
    pub test_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub datasets: BTreeMap<String, DatasetEntry>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            datasets: BTreeMap::new(),
        }
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Hashes every regular file directly inside `dir` (sorted by name).
pub fn hash_dataset_files(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = BTreeMap::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    for path in entries {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        if name == MANIFEST_FILE {
            continue;
        }
        files.insert(name, sha256_file(&path)?);
    }
    Ok(files)
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(&path, format!("bad manifest: {e}")))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn upsert(&mut self, dataset: &str, entry: DatasetEntry) {
        self.datasets.insert(dataset.to_string(), entry);
    }

    /// Re-hashes the dataset directory and compares with the cached entry.
    /// Returns the list of mismatched or missing files (empty = verified).
    pub fn verify(&self, root: &Path, dataset: &str, dir: &Path) -> Result<Vec<String>> {
        let _ = root;
        let entry = self
            .datasets
            .get(dataset)
            .ok_or_else(|| Error::Config(format!("dataset '{dataset}' not in manifest")))?;
        let current = hash_dataset_files(dir)?;
        let mut bad = Vec::new();
        for (name, digest) in &entry.files {
            match current.get(name) {
                Some(d) if d == digest => {}
                Some(_) => bad.push(format!("{name} (checksum changed)")),
                None => bad.push(format!("{name} (missing)")),
            }
        }
        Ok(bad)
    }
}
