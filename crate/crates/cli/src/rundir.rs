//! Run directories: one per invocation, holding everything needed to re-run it.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::Settings;
use crate::UsageError;

/// Environment variable naming the default runs root.
pub const RUNS_DIR_ENV: &str = "CODAIL_RUNS_DIR";
pub const DEFAULT_RUNS_DIR: &str = "runs";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Serialize)]
struct Meta<'a> {
    version: &'a str,
    command: &'a str,
    seed: u64,
}

#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

/// Root for new run directories: flag, then environment, then `runs`.
pub fn runs_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(RUNS_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUNS_DIR))
}

impl RunDir {
    /// Uses `explicit` when given (it must be absent or empty), otherwise creates
    /// `<root>/<timestamp>-seed<seed>`.
    pub fn create(explicit: Option<&Path>, root: Option<&Path>, seed: u64) -> Result<Self> {
        let path = match explicit {
            Some(p) => {
                if p.exists() && fs::read_dir(p).with_context(|| format!("reading {}", p.display()))?.next().is_some() {
                    return Err(UsageError(format!("run directory {} is not empty", p.display())).into());
                }
                p.to_path_buf()
            }
            None => {
                let root = runs_root(root);
                let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
                let base = format!("{stamp}-seed{seed}");
                let mut candidate = root.join(&base);
                let mut k = 1;
                while candidate.exists() {
                    candidate = root.join(format!("{base}-{k}"));
                    k += 1;
                }
                candidate
            }
        };
        fs::create_dir_all(&path).with_context(|| format!("creating run directory {}", path.display()))?;
        Ok(RunDir { path })
    }

    pub fn file(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.path.join(rel)
    }

    pub fn write(&self, rel: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.file(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    /// Resolved configuration plus seed, command and version tag.
    pub fn record(&self, settings: &Settings, command: &str, seed: u64) -> Result<()> {
        self.write("config.toml", settings.to_toml()?)?;
        let meta = Meta {
            version: VERSION,
            command,
            seed,
        };
        self.write("meta.json", serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }
}

/// Command recorded in a run directory's `meta.json`.
pub fn recorded_command(dir: &Path) -> Result<String> {
    let p = dir.join("meta.json");
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
    v.get("command")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| UsageError(format!("{} has no command field", p.display())).into())
}
