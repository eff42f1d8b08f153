//! Run manifests written next to every CLI output.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    /// Arguments after the subcommand, as given.
    pub args: Vec<String>,
    /// Canonical config text; empty for commands without a config.
    pub config: String,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub format_versions: FormatVersions,
    pub outputs: Vec<OutputFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormatVersions {
    pub checkpoint: u32,
    pub dataset: u32,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl Manifest {
    pub fn new(command: &str, args: &[String], config: Option<&Config>, seed: u64) -> Self {
        Manifest {
            command: command.to_string(),
            args: args.to_vec(),
            config: config.map(Config::canonical).unwrap_or_default(),
            config_hash: config.map(Config::hash).unwrap_or_default(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            format_versions: FormatVersions {
                checkpoint: crate::checkpoint::FORMAT_VERSION,
                dataset: 1,
            },
            outputs: Vec::new(),
        }
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        let files: Vec<PathBuf> = if path.is_dir() {
            let mut v: Vec<PathBuf> = fs::read_dir(path)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            v.sort();
            v.retain(|p| p.is_file());
            v
        } else {
            vec![path.to_path_buf()]
        };
        for f in files {
            self.outputs.push(OutputFile {
                sha256: sha256_file(&f)?,
                path: f.display().to_string(),
            });
        }
        Ok(())
    }

    /// The embedded config, parsed back.
    pub fn config(&self) -> Result<Config> {
        Ok(Config::parse(&self.config)?)
    }

    /// Manifest path for an output: `model.ckpt` → `model.ckpt.manifest.json`,
    /// a directory `data/` → `data/manifest.json`.
    pub fn path_for(output: &Path) -> PathBuf {
        if output.is_dir() {
            output.join("manifest.json")
        } else {
            let mut s = output.as_os_str().to_owned();
            s.push(".manifest.json");
            PathBuf::from(s)
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}
