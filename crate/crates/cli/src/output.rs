//! Output directories, CSV emission and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::error::Failure;

pub const OUT_ENV: &str = "CROWDLEDGER_OUT";
const DEFAULT_ROOT: &str = "crowdledger-out";

/// `--out` if given, else `<root>/<command>` where root comes from
/// `CROWDLEDGER_OUT` or defaults to `crowdledger-out`.
pub fn resolve_out(out: Option<&Path>, command: &str) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT));
            root.join(command)
        }
    }
}

/// Collects the files a command writes so the manifest can list them.
pub struct OutputDir {
    root: PathBuf,
    written: Vec<String>,
    started: Instant,
    manifest_name: &'static str,
}

impl OutputDir {
    pub fn create(root: PathBuf) -> Result<Self, Failure> {
        fs::create_dir_all(&root).map_err(|e| Failure::io(&root, e))?;
        Ok(OutputDir { root, written: Vec::new(), started: Instant::now(), manifest_name: "manifest.json" })
    }

    /// Writes the manifest under another name, leaving an existing one alone.
    pub fn with_manifest_name(mut self, name: &'static str) -> Self {
        self.manifest_name = name;
        self
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Failure::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Failure::io(&path, e))?;
        self.record(name);
        Ok(())
    }

    /// Runs `fill` against an in-memory buffer and writes the result.
    pub fn write_with<F>(&mut self, name: &str, fill: F) -> Result<(), Failure>
    where
        F: FnOnce(&mut Vec<u8>) -> Result<(), Failure>,
    {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.write_bytes(name, &buf)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), Failure> {
        self.write_with(name, |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(header).map_err(|e| Failure::Runtime(e.to_string()))?;
            for row in rows {
                w.write_record(row).map_err(|e| Failure::Runtime(e.to_string()))?;
            }
            w.flush().map_err(|e| Failure::Runtime(e.to_string()))
        })
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), Failure> {
        self.write_bytes(name, text.as_bytes())
    }

    fn record(&mut self, name: &str) {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
    }

    /// Writes the manifest through a temporary file and a rename.
    pub fn finish(
        mut self,
        command: &str,
        config_digest: Option<String>,
        seed: Option<u64>,
    ) -> Result<PathBuf, Failure> {
        self.written.sort();
        let manifest = RunManifest {
            command: command.to_string(),
            config_digest,
            seed,
            outputs: self.written,
            versions: Versions { crowdledger: env!("CARGO_PKG_VERSION").to_string() },
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let path = self.root.join(self.manifest_name);
        let tmp = self.root.join(format!(".{}.tmp", self.manifest_name));
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| Failure::Runtime(e.to_string()))?;
        bytes.push(b'\n');
        let mut f = fs::File::create(&tmp).map_err(|e| Failure::io(&tmp, e))?;
        f.write_all(&bytes).and_then(|_| f.sync_all()).map_err(|e| Failure::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Failure::io(&path, e))?;
        Ok(path)
    }
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub crowdledger: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the resolved config (after flag overrides).
    pub config_digest: Option<String>,
    pub seed: Option<u64>,
    pub outputs: Vec<String>,
    pub versions: Versions,
    pub wall_clock_seconds: f64,
}

pub fn num(v: f64) -> String {
    format!("{v}")
}
