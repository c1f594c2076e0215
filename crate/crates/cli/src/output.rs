//! Artifact emission: CSV and JSON files, the manifest and the plot script.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// 17 significant digits.
pub fn float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash in the style of a git blob id, over SHA-256.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// In-memory CSV with a fixed header.
pub struct Csv {
    buf: String,
    columns: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self { buf: format!("{}\n", header.join(",")), columns: header.len() }
    }

    pub fn row(&mut self, fields: &[String]) {
        assert_eq!(fields.len(), self.columns, "CSV row width");
        let _ = writeln!(self.buf, "{}", fields.join(","));
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf.into_bytes()
    }
}

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
    bytes: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    config_sha256: String,
    inputs_hash: String,
    effective_config: &'a str,
    resolved: &'a serde_json::Value,
    files: &'a [FileEntry],
    wall_time_seconds: f64,
}

/// Files written into the output directory, in order.
pub struct Artifacts {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.files.push(FileEntry { path: name.into(), sha256: sha256_hex(bytes), bytes: bytes.len() });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes `manifest.json`, which lists every other file.
    pub fn finish(
        self,
        subcommand: &str,
        config_bytes: &[u8],
        effective_config: &str,
        resolved: &serde_json::Value,
        wall_time_seconds: f64,
    ) -> Result<PathBuf, CliError> {
        let manifest = Manifest {
            tool: "rfcw",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            config_sha256: sha256_hex(config_bytes),
            inputs_hash: blob_hash(config_bytes),
            effective_config,
            resolved,
            files: &self.files,
            wall_time_seconds,
        };
        let path = self.dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Gnuplot script for whichever of the survival and landscape tables exist.
pub fn plot_script(survival: bool, landscape: bool) -> String {
    let mut s = String::from("# gnuplot script; run with `gnuplot plot.gp` in this directory\nset datafile separator ','\nset terminal pngcairo size 800,600\n");
    if survival {
        s.push_str(
            "set output 'survival.png'\nset logscale y\nset xlabel 't / mean'\nset ylabel 'P(tau/mean > t)'\n\
             plot 'survival.csv' using 1:2 skip 1 with steps title 'empirical', \\\n     \
             'survival.csv' using 1:3 skip 1 with lines title 'exp(-t)'\nunset logscale y\n",
        );
    }
    if landscape {
        s.push_str(
            "set output 'landscape.png'\nset xlabel 'm'\nset ylabel 'F'\n\
             plot 'landscape.csv' using 1:2 skip 1 with lines title 'free energy along the lifted curve'\n",
        );
    }
    s
}
