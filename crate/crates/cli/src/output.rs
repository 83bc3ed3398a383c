use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<String>,
    pub seed: u64,
    pub out: String,
    pub run_id: String,
    pub version: &'static str,
}

impl RunManifest {
    pub fn new(command: &str, config: Option<(&Path, &str)>, seed: u64, out: &Path, extra: &str) -> Self {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        if let Some((_, text)) = config {
            h.update(text.as_bytes());
        }
        h.update(seed.to_le_bytes());
        h.update(extra.as_bytes());
        let digest = h.finalize();
        let run_id = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        Self {
            command: command.into(),
            config: config.map(|(p, _)| p.display().to_string()),
            seed,
            out: out.display().to_string(),
            run_id,
            version: env!("CARGO_PKG_VERSION"),
        }
    }
}

/// Output directory that is filled under a staging name and renamed into
/// place once the command finishes, successfully or not.
pub struct OutputDir {
    staging: PathBuf,
    target: PathBuf,
}

impl OutputDir {
    pub fn create(target: &Path, manifest: &RunManifest) -> CliResult<Self> {
        if target.exists() {
            let empty = fs::read_dir(target).map(|mut d| d.next().is_none()).unwrap_or(false);
            if !empty {
                return Err(CliError::Config(format!("{}: output directory exists and is not empty", target.display())));
            }
        }
        let name = target.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
        let staging = target.with_file_name(format!(".{name}.{}.partial", manifest.run_id));
        if let Some(parent) = staging.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir(&staging)?;
        let dir = Self { staging, target: target.to_path_buf() };
        dir.write_json("manifest.json", manifest)?;
        Ok(dir)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    pub fn writer(&self, name: &str) -> CliResult<BufWriter<fs::File>> {
        Ok(BufWriter::new(fs::File::create(self.path(name))?))
    }

    pub fn csv(&self, name: &str) -> CliResult<csv::Writer<fs::File>> {
        Ok(csv::Writer::from_path(self.path(name))?)
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> CliResult<()> {
        let mut w = self.writer(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn finish(self) -> CliResult<PathBuf> {
        if self.target.exists() {
            fs::remove_dir(&self.target)?;
        }
        fs::rename(&self.staging, &self.target)?;
        Ok(self.target)
    }
}
