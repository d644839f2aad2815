//! Artifact directory: CSV files with versioned schemas, derived seeds, and
//! the manifest that ties them to the resolved config.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{Context, Result};
use nhl::seed::derive_seed;
use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";

/// Component seeds derived from the master seed, recorded as they are used.
#[derive(Debug)]
pub struct Seeds {
    master: u64,
    used: Mutex<BTreeMap<String, u64>>,
}

impl Seeds {
    pub fn new(master: u64) -> Self {
        Seeds { master, used: Mutex::new(BTreeMap::new()) }
    }

    pub fn get(&self, name: &str) -> u64 {
        let seed = derive_seed(self.master, name);
        self.used.lock().unwrap().insert(name.to_string(), seed);
        seed
    }

    pub fn recorded(&self) -> BTreeMap<String, u64> {
        self.used.lock().unwrap().clone()
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct FileRecord {
    pub path: String,
    pub schema: String,
    pub version: u32,
    pub columns: Vec<String>,
}

/// Schema names and versions of every CSV the driver writes.
pub mod schema {
    pub const TRAJECTORY: (&str, u32) = ("trajectory", 1);
    pub const PREDICTIONS: (&str, u32) = ("predictions", 1);
    pub const LINEAR_MF: (&str, u32) = ("linear_mf", 1);
    pub const PARTICLES: (&str, u32) = ("particles", 1);
    pub const DEVIATION: (&str, u32) = ("deviation", 1);
    pub const GRAM: (&str, u32) = ("gram", 1);
    pub const KERNEL_SUMMARY: (&str, u32) = ("kernel_summary", 1);
    pub const DECAY: (&str, u32) = ("decay", 1);
    pub const RADEMACHER: (&str, u32) = ("rademacher", 1);
    pub const FRONTIER: (&str, u32) = ("frontier", 1);
    pub const CURVES: (&str, u32) = ("curves", 1);
    pub const PREACTIVATIONS: (&str, u32) = ("preactivations", 1);
    pub const FIT: (&str, u32) = ("fit", 1);
    pub const NEURON_SPREAD: (&str, u32) = ("neuron_spread", 1);
}

#[derive(Debug)]
pub struct Output {
    dir: PathBuf,
    files: Mutex<Vec<FileRecord>>,
}

impl Output {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Output { dir: dir.to_path_buf(), files: Mutex::new(Vec::new()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Registers `name` and returns its full path.
    pub fn register(&self, name: &str, schema: (&str, u32), columns: Vec<String>) -> PathBuf {
        let rec = FileRecord { path: name.to_string(), schema: schema.0.to_string(), version: schema.1, columns };
        let mut files = self.files.lock().unwrap();
        files.retain(|f| f.path != name);
        files.push(rec);
        self.dir.join(name)
    }

    /// Writes a CSV with a header row and registers it.
    pub fn write_csv(&self, name: &str, schema: (&str, u32), header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let path = self.register(name, schema, header.to_vec());
        let mut w = csv::Writer::from_writer(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `manifest.json`; no wall-clock or host data goes in.
    pub fn finish(&self, cfg: &RunConfig, seeds: &Seeds, summary: &BTreeMap<String, Value>) -> Result<PathBuf> {
        let mut files = self.files.lock().unwrap().clone();
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            tool: "nhl",
            version: env!("CARGO_PKG_VERSION"),
            experiment: cfg.experiment.tag(),
            config: cfg,
            seeds: seeds.recorded(),
            files,
            summary,
        };
        let path = self.dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    experiment: &'static str,
    config: &'a RunConfig,
    seeds: BTreeMap<String, u64>,
    files: Vec<FileRecord>,
    summary: &'a BTreeMap<String, Value>,
}

/// Column names `prefix_1..prefix_n`.
pub fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}

pub fn cols(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

pub fn num(v: f64) -> String {
    v.to_string()
}
