//! Output directory bookkeeping and the run manifest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

/// Verdict of one invariant check.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub limit: f64,
    pub detail: String,
}

impl Check {
    /// Passes when `value <= limit`.
    pub fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Self { name: name.into(), passed: value <= limit, value, limit, detail: format!("{value:.6e} <= {limit:.6e}") }
    }
    /// Passes when `value >= limit`.
    pub fn at_least(name: &str, value: f64, limit: f64) -> Self {
        Self { name: name.into(), passed: value >= limit, value, limit, detail: format!("{value:.6e} >= {limit:.6e}") }
    }
    pub fn flag(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, value: f64::from(u8::from(passed)), limit: 1.0, detail: detail.into() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub mode: String,
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    /// Values chosen by the `"auto"` rules and other derived settings.
    pub resolved: BTreeMap<String, f64>,
    pub tolerances: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Files written into one output directory.
#[derive(Debug)]
pub struct Artifacts {
    dir: PathBuf,
    names: Vec<String>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), names: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_with(&mut self, name: &str, body: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> io::Result<()> {
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        body(&mut w)?;
        w.flush()?;
        if !self.names.iter().any(|n| n == name) {
            self.names.push(name.to_string());
        }
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> io::Result<()> {
        self.write_with(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)
        })
    }

    /// Hashes every file, checks that nothing unlisted sits in the
    /// directory and writes the manifest.
    pub fn finish(self, mut manifest: RunManifest) -> io::Result<RunManifest> {
        let mut files = Vec::new();
        for name in &self.names {
            let bytes = fs::read(self.dir.join(name))?;
            files.push(FileEntry { name: name.clone(), bytes: bytes.len() as u64, sha256: sha256_hex(&bytes) });
        }
        let mut stray = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if name != MANIFEST && !self.names.contains(&name) {
                stray.push(name);
            }
        }
        stray.sort();
        manifest.checks.push(Check::flag(
            "manifest-complete",
            stray.is_empty(),
            if stray.is_empty() { "every file is listed".to_string() } else { format!("unlisted: {}", stray.join(", ")) },
        ));
        manifest.files = files;
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(self.dir.join(MANIFEST), text + "\n")?;
        Ok(manifest)
    }
}
