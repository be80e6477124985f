//! Run directory layout: `config.echo`, `manifest.json`, `logs/`,
//! `artifacts/`.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const CONFIG_ECHO: &str = "config.echo";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// SHA-256 of the echoed config text.
    pub config_hash: String,
    pub seed: u64,
    pub config: String,
    pub complete: bool,
    /// Keys of finished units of work (files, grid cells).
    pub done: Vec<String>,
    pub artifacts: Vec<PathBuf>,
}

pub struct RunDir {
    root: PathBuf,
    manifest: RunManifest,
}

pub fn config_hash(text: &str) -> String {
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

impl RunDir {
    /// Creates or reopens a run directory. Reopening is allowed only for the
    /// same command and config; finished work recorded there is kept.
    pub fn open(root: &Path, command: &str, config: &str, seed: u64) -> Result<Self, CliError> {
        fs::create_dir_all(root.join("logs"))?;
        fs::create_dir_all(root.join("artifacts"))?;
        let hash = config_hash(config);
        let path = root.join(MANIFEST);
        let previous = if path.exists() {
            let m: RunManifest = serde_json::from_str(&fs::read_to_string(&path)?)
                .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
            if m.command != command || m.config_hash != hash {
                return Err(CliError::Usage(format!(
                    "{} holds a different run ({} with config {}); use a fresh directory",
                    root.display(),
                    m.command,
                    &m.config_hash[..12]
                )));
            }
            Some(m)
        } else {
            None
        };
        fs::write(root.join(CONFIG_ECHO), config)?;
        let argv = std::env::args().collect();
        let manifest = match previous {
            Some(m) => RunManifest { argv, ..m },
            None => RunManifest {
                command: command.into(),
                argv,
                config_hash: hash,
                seed,
                config: config.into(),
                complete: false,
                done: Vec::new(),
                artifacts: Vec::new(),
            },
        };
        let run = RunDir {
            root: root.to_path_buf(),
            manifest,
        };
        run.save()?;
        Ok(run)
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn artifact(&self, rel: &str) -> PathBuf {
        self.root.join("artifacts").join(rel)
    }

    pub fn log_path(&self, rel: &str) -> PathBuf {
        self.root.join("logs").join(rel)
    }

    pub fn is_done(&self, key: &str) -> bool {
        self.manifest.done.iter().any(|k| k == key)
    }

    pub fn mark_done(&mut self, key: &str) -> Result<(), CliError> {
        if !self.is_done(key) {
            self.manifest.done.push(key.into());
        }
        self.save()
    }

    pub fn add_artifact(&mut self, path: &Path) -> Result<(), CliError> {
        if !self.manifest.artifacts.iter().any(|p| p == path) {
            self.manifest.artifacts.push(path.to_path_buf());
        }
        self.save()
    }

    pub fn finish(&mut self) -> Result<(), CliError> {
        self.manifest.complete = true;
        self.save()
    }

    fn save(&self) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let tmp = self.root.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp, text)?;
        fs::rename(tmp, self.root.join(MANIFEST))?;
        Ok(())
    }

    /// Routes log records to stderr and `logs/<command>.log`.
    pub fn init_logging(&self) -> Result<(), CliError> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.log_path(&format!("{}.log", self.manifest.command)))?;
        let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
            .target(env_logger::Target::Pipe(Box::new(Tee { file })))
            .try_init();
        Ok(())
    }
}

struct Tee {
    file: fs::File,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        io::stderr().write_all(buf)?;
        self.file.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        io::stderr().flush()?;
        self.file.flush()
    }
}
