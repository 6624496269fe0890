//! Append-only result store: one JSON document per record, an index CSV,
//! and per-run artifact directories.
//!
//! ```text
//! <root>/index.csv
//! <root>/configs/<config hash>.toml
//! <root>/records/<config hash>/seed-<s>/run-<r>/<variant>.json
//! <root>/records/<config hash>/seed-<s>/run-<r>/<variant>/...   artifacts
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Preset};
use crate::error::{Error, Result};
use crate::util::{sha256_hex, sha256_json};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Variant name of the record written when a seed fails.
pub const FAILURE_VARIANT: &str = "failure";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub preset: Preset,
    /// Step, selection, toggle set or sigma this record measures.
    pub variant: String,
    pub config_hash: String,
    pub spec_hash: Option<String>,
    pub recipe_hash: Option<String>,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub wall_time_s: f64,
    /// Paths relative to the store root.
    pub artifacts: Vec<PathBuf>,
    pub tool_version: String,
    /// Cause, for failure records.
    pub error: Option<String>,
}

impl ResultRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    record: ResultRecord,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub path: String,
    pub preset: String,
    pub variant: String,
    pub config_hash: String,
    pub seed: u64,
    pub ok: bool,
    pub sha256: String,
}

/// File-name-safe form of a variant name.
pub fn slug(variant: &str) -> String {
    variant.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

/// Empty file in a run directory whose seed finished every variant.
pub const COMPLETE_MARKER: &str = "COMPLETE";

pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Store> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn index_path(&self) -> PathBuf {
        self.root.join("index.csv")
    }

    pub fn index(&self) -> Result<Vec<IndexRow>> {
        let path = self.index_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut r = csv::Reader::from_path(&path)?;
        Ok(r.deserialize().collect::<std::result::Result<Vec<IndexRow>, _>>()?)
    }

    /// Seeds of `config_hash` with a run that finished every variant.
    pub fn completed_seeds(&self, config_hash: &str) -> Result<BTreeSet<u64>> {
        Ok(self
            .index()?
            .into_iter()
            .filter(|r| r.config_hash == config_hash && r.ok)
            .filter(|r| Path::new(&r.path).parent().is_some_and(|run| self.root.join(run).join(COMPLETE_MARKER).exists()))
            .map(|r| r.seed)
            .collect())
    }

    /// Flag a run directory whose seed finished without error.
    pub fn mark_complete(&self, run_dir: &Path) -> Result<()> {
        let p = run_dir.join(COMPLETE_MARKER);
        fs::write(&p, b"").map_err(|e| Error::io(&p, e))
    }

    pub fn save_config(&self, cfg: &ExperimentConfig) -> Result<PathBuf> {
        let dir = self.root.join("configs");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{}.toml", cfg.hash()));
        if !path.exists() {
            fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(path)
    }

    /// A fresh run directory for `(config_hash, seed)`.
    pub fn new_run_dir(&self, config_hash: &str, seed: u64) -> Result<PathBuf> {
        let seed_dir = self.root.join("records").join(config_hash).join(format!("seed-{seed}"));
        let mut r = 0;
        while seed_dir.join(format!("run-{r}")).exists() {
            r += 1;
        }
        let dir = seed_dir.join(format!("run-{r}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    pub fn relative(&self, path: &Path) -> PathBuf {
        path.strip_prefix(&self.root).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
    }

    /// Write `record` into `run_dir` and index it. Never overwrites.
    pub fn append(&self, run_dir: &Path, record: &ResultRecord) -> Result<PathBuf> {
        let base = slug(&record.variant);
        let mut path = run_dir.join(format!("{base}.json"));
        let mut k = 1;
        while path.exists() {
            path = run_dir.join(format!("{base}.{k}.json"));
            k += 1;
        }
        let sha256 = checksum(record);
        let doc = Document { record: record.clone(), sha256: sha256.clone() };
        let text = serde_json::to_string_pretty(&doc)?;
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| Error::io(&path, e))?;
        std::io::Write::write_all(&mut f, text.as_bytes()).map_err(|e| Error::io(&path, e))?;
        let index = self.index_path();
        let fresh = !index.exists();
        let file = OpenOptions::new().append(true).create(true).open(&index).map_err(|e| Error::io(&index, e))?;
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        w.serialize(IndexRow {
            path: self.relative(&path).to_string_lossy().into_owned(),
            preset: record.preset.as_str().into(),
            variant: record.variant.clone(),
            config_hash: record.config_hash.clone(),
            seed: record.seed,
            ok: record.ok(),
            sha256,
        })?;
        w.flush().map_err(|e| Error::io(&index, e))?;
        Ok(path)
    }
}

fn checksum(record: &ResultRecord) -> String {
    sha256_json(record)
}

/// Read one record and verify its checksum.
pub fn load_record(path: &Path) -> Result<ResultRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let doc: Document = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Corrupted { path: path.to_path_buf(), reason: e.to_string() })?;
    if checksum(&doc.record) != doc.sha256 {
        return Err(Error::Corrupted { path: path.to_path_buf(), reason: "checksum mismatch".into() });
    }
    Ok(doc.record)
}

/// Records under `paths`; directories are searched recursively for
/// `.json` documents, in sorted order.
pub fn load_records(paths: &[PathBuf]) -> Result<Vec<(PathBuf, ResultRecord)>> {
    let mut files = Vec::new();
    for p in paths {
        collect_json(p, &mut files)?;
    }
    files.into_iter().map(|f| load_record(&f).map(|r| (f, r))).collect()
}

fn collect_json(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> =
            fs::read_dir(path).map_err(|e| Error::io(path, e))?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>().map_err(|e| Error::io(path, e))?;
        entries.sort();
        for e in entries {
            collect_json(&e, out)?;
        }
    } else if path.extension().is_some_and(|e| e == "json") {
        out.push(path.to_path_buf());
    } else if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such record")));
    }
    Ok(())
}

/// Digest of a set of config hashes, used to name reports.
pub fn key_for(hashes: &BTreeSet<&str>) -> String {
    match hashes.iter().next() {
        Some(h) if hashes.len() == 1 => h[..16.min(h.len())].to_string(),
        _ => sha256_hex(hashes.iter().copied().collect::<Vec<_>>().join(",").as_bytes())[..16].to_string(),
    }
}
