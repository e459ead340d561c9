//! Deterministic run artifacts: fixed-format numbers, CSV tables, and a
//! manifest listing every file a command writes.
//!
//! Two runs of the same command on the same inputs must produce
//! byte-identical data files; only the manifest timestamp may differ. All
//! floating-point output therefore goes through [`fmt_float`], tables get a
//! fixed column order with `\n` line endings, and the manifest records a
//! SHA-256 digest per output so reruns can be compared at a glance.

use crate::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

/// Render a float with 17 significant digits, enough to round-trip any
/// `f64` exactly.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Hex SHA-256 digest of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// In-memory CSV table with a fixed header.
#[derive(Debug, Clone)]
pub struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Table {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Append a row; the cell count must match the header.
    pub fn push_row(&mut self, cells: Vec<String>) {
        assert_eq!(
            cells.len(),
            self.columns.len(),
            "row width does not match table header"
        );
        self.rows.push(cells);
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Serialize as CSV: comma-separated, header first, `\n` endings.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Description of one CLI invocation and everything it wrote.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub spec_path: String,
    pub spec_sha256: String,
    pub version: String,
    pub created_utc: String,
    pub config: serde_json::Value,
    pub outputs: Vec<OutputFile>,
}

/// Output directory in the process of being filled: data files are written
/// and recorded one by one, then [`OutputDir::finish`] seals the manifest.
pub struct OutputDir {
    dir: PathBuf,
    manifest: RunManifest,
}

impl OutputDir {
    /// Create (or reuse) `dir` and start a manifest for `command`.
    pub fn create(
        dir: &Path,
        command: &str,
        spec_path: &str,
        spec_bytes: &[u8],
        config: serde_json::Value,
    ) -> Result<OutputDir> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(OutputDir {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                spec_path: spec_path.to_string(),
                spec_sha256: sha256_hex(spec_bytes),
                version: env!("CARGO_PKG_VERSION").to_string(),
                created_utc: chrono::Utc::now()
                    .to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                config,
                outputs: Vec::new(),
            },
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Write one data file and record it in the manifest.
    pub fn write_file(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
        self.manifest.outputs.push(OutputFile {
            name: name.to_string(),
            bytes: contents.len() as u64,
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(path)
    }

    /// Write `manifest.json` and return its path.
    pub fn finish(self) -> Result<PathBuf> {
        let path = self.dir.join("manifest.json");
        let mut body =
            serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        body.push('\n');
        fs::write(&path, body).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}
