//! The run configuration shared by every command.

use std::path::Path;

use anyhow::{bail, Context};
use pdanet::ablation::Variant;
use pdanet::datagen::SynthSpec;
use pdanet::evaluator::{ProbeSpec, QUERIES_PER_IDENTITY};
use pdanet::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub queries_per_identity: usize,
    pub probes: ProbeSpec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { queries_per_identity: QUERIES_PER_IDENTITY, probes: ProbeSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub variants: Vec<Variant>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { variants: Variant::ALL.to_vec() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: SynthSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

/// A config as read from disk plus the merged result after overrides.
#[derive(Debug)]
pub struct Loaded {
    /// Exact bytes of the input file.
    pub raw: Option<Vec<u8>>,
    pub config: Config,
}

impl Loaded {
    /// Writes `config.toml` (the input, byte for byte) and
    /// `config.resolved.toml` (after overrides) into `dir`.
    pub fn snapshot(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        if let Some(raw) = &self.raw {
            let p = dir.join("config.toml");
            std::fs::write(&p, raw).with_context(|| format!("writing {}", p.display()))?;
        }
        let p = dir.join("config.resolved.toml");
        let text = toml::to_string(&self.config).context("serialising the resolved config")?;
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }
}

/// Sets `path` (dotted keys) in `root` to `value`, creating tables on the way.
fn set_path(root: &mut toml::Table, path: &str, value: toml::Value) -> anyhow::Result<()> {
    let mut keys = path.split('.').peekable();
    let mut table = root;
    while let Some(key) = keys.next() {
        if key.is_empty() {
            bail!("empty key in override {path:?}");
        }
        if keys.peek().is_none() {
            table.insert(key.to_string(), value);
            return Ok(());
        }
        let next = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match next {
            toml::Value::Table(t) => t,
            _ => bail!("override {path:?}: {key} is not a table"),
        };
    }
    unreachable!("split yields at least one key")
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string.
fn parse_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

/// Reads `path` (or starts from defaults) and applies `key=value` overrides.
pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Loaded> {
    let (raw, mut table) = match path {
        Some(p) => {
            let raw = std::fs::read(p).with_context(|| format!("reading config {}", p.display()))?;
            let text = std::str::from_utf8(&raw).with_context(|| format!("{} is not UTF-8", p.display()))?;
            let table: toml::Table = toml::from_str(text).with_context(|| format!("parsing config {}", p.display()))?;
            (Some(raw), table)
        }
        None => (None, toml::Table::new()),
    };
    for o in overrides {
        let Some((key, value)) = o.split_once('=') else {
            bail!("override {o:?} is not of the form key=value");
        };
        set_path(&mut table, key.trim(), parse_value(value.trim()))?;
    }
    let source = path.map_or_else(|| "defaults".to_string(), |p| p.display().to_string());
    let config: Config = toml::Value::Table(table).try_into().with_context(|| format!("invalid config {source}"))?;
    config.data.validate().with_context(|| format!("invalid [data] in {source}"))?;
    config.train.validate().with_context(|| format!("invalid [train] in {source}"))?;
    Ok(Loaded { raw, config })
}
