use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Local, SecondsFormat};
use light_reskan::seed::derive_seed;
use light_reskan::{Error, Result};
use serde::Serialize;

use crate::config::Config;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Seeds of one run, all derived from the master seed.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Seeds {
    pub master: u64,
    pub model: u64,
    pub train: u64,
    pub noise: u64,
    pub kshot: u64,
    pub bench: u64,
}

impl Seeds {
    pub fn new(master: u64) -> Self {
        Seeds {
            master,
            model: derive_seed(master, "model", 0),
            train: master,
            noise: derive_seed(master, "noise", 0),
            kshot: derive_seed(master, "kshot", 0),
            bench: derive_seed(master, "bench", 0),
        }
    }
}

/// An output directory holding the artifacts of one command and, once it
/// succeeds, a single `manifest.json`.
pub struct Run {
    pub dir: PathBuf,
    pub command: &'static str,
    pub config: Config,
    pub seeds: Seeds,
    started: DateTime<Local>,
    outputs: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    software: &'static str,
    version: &'static str,
    command: &'a str,
    argv: Vec<String>,
    seeds: Seeds,
    started: String,
    finished: String,
    run_dir: &'a Path,
    outputs: &'a [PathBuf],
    config: &'a Config,
}

impl Run {
    /// Creates `<run.out_dir>/<timestamp>-<command>-seed<seed>`, or
    /// `exact` when given.
    pub fn create(command: &'static str, config: Config, exact: Option<&Path>) -> Result<Self> {
        let started = Local::now();
        let seeds = Seeds::new(config.run.seed);
        let dir = match exact {
            Some(d) => d.to_path_buf(),
            None => {
                let stem = format!("{}-{command}-seed{}", started.format("%Y%m%d-%H%M%S"), seeds.master);
                let base = config.run.out_dir.join(&stem);
                let mut dir = base.clone();
                let mut n = 1;
                while dir.exists() {
                    dir = config.run.out_dir.join(format!("{stem}-{n}"));
                    n += 1;
                }
                dir
            }
        };
        if dir.join(MANIFEST_FILE).exists() {
            return Err(Error::Usage(format!("{} already holds a finished run", dir.display())));
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Run { dir, command, config, seeds, started, outputs: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records an artifact (relative to the run directory when inside it).
    pub fn output(&mut self, path: impl AsRef<Path>) {
        let p = path.as_ref();
        self.outputs.push(p.strip_prefix(&self.dir).unwrap_or(p).to_path_buf());
    }

    pub fn write(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.output(&path);
        Ok(path)
    }

    /// Writes the manifest; the run counts as complete afterwards.
    pub fn finish(self) -> Result<PathBuf> {
        let manifest = Manifest {
            software: "light-reskan",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            argv: std::env::args().collect(),
            seeds: self.seeds,
            started: self.started.to_rfc3339_opts(SecondsFormat::Secs, false),
            finished: Local::now().to_rfc3339_opts(SecondsFormat::Secs, false),
            run_dir: &self.dir,
            outputs: &self.outputs,
            config: &self.config,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Runtime(e.to_string()))?;
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(self.dir)
    }
}
