//! TOML run configuration: `[run]`, `[network]`, `[train]`, `[data]`,
//! `[noise]` and `[audit]` sections, every key optional. Command-line
//! `--set section.key=value` pairs and the dedicated flags are applied on
//! top of the file.

use std::fs;
use std::path::{Path, PathBuf};

use light_reskan::data::{DatasetKind, SyntheticSpec};
use light_reskan::network::NetworkConfig;
use light_reskan::speckle::Parametrization;
use light_reskan::trainer::TrainConfig;
use light_reskan::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Master seed; every random stream of a run derives from it.
    pub seed: u64,
    /// Parent directory of per-run output directories.
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 0, out_dir: PathBuf::from("runs") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub kind: DatasetKind,
    /// Folder of class folders. Empty with `kind = "synthetic"` means the
    /// splits are generated in memory from `[data.synthetic]`.
    pub train_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { kind: DatasetKind::Synthetic, train_dir: None, test_dir: None, synthetic: SyntheticSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    /// How the presets' second parameter is read.
    pub parametrization: Parametrization,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection { parametrization: Parametrization::Scale }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditSection {
    pub height: usize,
    pub width: usize,
    pub batch: usize,
    /// Conv path whose transient buffers are charged to the memory column.
    pub path: String,
    pub bench_repetitions: usize,
}

impl Default for AuditSection {
    fn default() -> Self {
        AuditSection { height: 112, width: 112, batch: 16, path: "fused".into(), bench_repetitions: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataSection,
    pub noise: NoiseSection,
    pub audit: AuditSection,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.data.synthetic.validate()?;
        if self.audit.height == 0 || self.audit.width == 0 || self.audit.batch == 0 {
            return Err(Error::Usage("audit.height, audit.width and audit.batch must be positive".into()));
        }
        Ok(())
    }
}

/// Loads `path` (or defaults when absent) and applies `overrides`, each a
/// `dotted.key=value` pair whose value is read as TOML, falling back to a
/// bare string. A `.json` path is read as a run manifest and its recorded
/// configuration is reused.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut config = match path {
        None => Config::default(),
        Some(p) if p.extension().is_some_and(|e| e == "json") => from_manifest(p)?,
        Some(p) => from_toml(p)?,
    };
    if !overrides.is_empty() {
        let mut table = toml::Table::try_from(&config).map_err(|e| Error::Runtime(format!("cannot re-encode config: {e}")))?;
        for pair in overrides {
            apply_override(&mut table, pair)?;
        }
        config = Config::deserialize(toml::Value::Table(table))
            .map_err(|e| Error::Usage(format!("--set: {}", with_suggestion(e.message()))))?;
    }
    config.train.seed = config.run.seed;
    config.validate().map_err(|e| match e {
        Error::Config(m) => Error::Usage(m),
        other => other,
    })?;
    Ok(config)
}

fn from_toml(path: &Path) -> Result<Config> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    if train_seed_given(&text) {
        return Err(Error::Usage(format!("{origin}: train.seed is derived from run.seed; set run.seed instead")));
    }
    toml::from_str(&text).map_err(|e| describe(&e, &text, &origin))
}

fn from_manifest(path: &Path) -> Result<Config> {
    #[derive(Deserialize)]
    struct Recorded {
        config: Config,
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let recorded: Recorded =
        serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: not a run manifest: {e}", path.display())))?;
    Ok(recorded.config)
}

fn train_seed_given(text: &str) -> bool {
    toml::from_str::<toml::Table>(text)
        .ok()
        .and_then(|t| t.get("train").and_then(|s| s.as_table()).map(|s| s.contains_key("seed")))
        .unwrap_or(false)
}

fn apply_override(table: &mut toml::Table, pair: &str) -> Result<()> {
    let (key, raw) = pair
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("--set expects key=value, got `{pair}`")))?;
    let key = key.trim();
    if key == "train.seed" {
        return Err(Error::Usage("train.seed is derived from run.seed; set run.seed instead".into()));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().filter(|(l, _)| !l.is_empty()).ok_or_else(|| Error::Usage(format!("empty key in `{pair}`")))?;
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn describe(e: &toml::de::Error, text: &str, origin: &str) -> Error {
    let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
    let at = line.map(|l| format!(" line {l}")).unwrap_or_default();
    Error::Usage(format!("{origin}{at}: {}", with_suggestion(e.message())))
}

/// Appends a did-you-mean hint to serde's "unknown field/variant `x`,
/// expected ..." messages.
fn with_suggestion(message: &str) -> String {
    let message = message.trim().replace('\n', " ");
    let Some(bad) = backticked(&message).first().cloned() else {
        return message;
    };
    if !(message.starts_with("unknown field") || message.starts_with("unknown variant")) {
        return message;
    }
    let candidates = backticked(&message).into_iter().skip(1);
    let best = candidates
        .map(|c| (strsim::jaro_winkler(&bad, &c), c))
        .filter(|(score, _)| *score >= 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0));
    match best {
        Some((_, c)) => format!("{message}; did you mean \"{c}\"?"),
        None => message,
    }
}

fn backticked(s: &str) -> Vec<String> {
    s.split('`').skip(1).step_by(2).map(str::to_string).collect()
}
