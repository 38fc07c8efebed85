//! Run configuration: one TOML document with `data`, `arch`, `generator`,
//! `train`, `eval`, `baselines` and `output` tables.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use cht_core::episodes::{ImageShape, PoolFormat};
use cht_core::eval::EvalConfig;
use cht_core::generator::GeneratorConfig;
use cht_core::learner::TrainConfig;
use cht_core::target_cnn::Arch;
use serde::{Deserialize, Serialize};

/// File name of the resolved snapshot written into every run directory.
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Png,
    Npy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `synthetic` generates pools; `png` and `npy` read one pool per root.
    pub source: DataSource,
    pub roots: Vec<PathBuf>,
    /// Image size fed to the target CNN. PNG pools are resized to it.
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub min_samples_per_class: usize,
    /// Standardize each pool to zero mean and unit variance.
    pub standardize: bool,
    /// Fraction of each pool's classes used for training; the rest is held out.
    pub train_fraction: f64,
    pub split_seed: u64,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            roots: Vec::new(),
            height: 12,
            width: 12,
            channels: 1,
            min_samples_per_class: 2,
            standardize: false,
            train_fraction: 0.8,
            split_seed: 1,
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.height, self.width, self.channels)
    }

    pub fn format(&self) -> Option<PoolFormat> {
        match self.source {
            DataSource::Synthetic => None,
            DataSource::Png => Some(PoolFormat::Png),
            DataSource::Npy => Some(PoolFormat::Npy),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// More than one domain gives one differently styled pool per domain.
    pub domains: usize,
    pub noise: f32,
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 60,
            samples_per_class: 20,
            domains: 1,
            noise: 0.15,
            max_shift: 1,
            seed: 7,
        }
    }
}

/// Target CNN shape; the input comes from `data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub num_blocks: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub dense_bias: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            num_blocks: 3,
            channels: 8,
            embed_dim: 16,
            dense_bias: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// ConstPN trains on episodes this many times wider than `train.way`.
    pub constpn_way_multiplier: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            constpn_way_multiplier: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Run directory name under the output root.
    pub name: String,
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Quick held-out evaluation during training; 0 disables it.
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Initialization seed of the generator.
    pub init_seed: u64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            checkpoint_every: 1000,
            log_every: 10,
            eval_every: 0,
            eval_episodes: 32,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub arch: ArchConfig,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub baselines: BaselineConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            arch: ArchConfig::default(),
            generator: GeneratorConfig::desk(),
            train: TrainConfig {
                tasks: 3,
                queries: 4,
                learning_rate: 1e-3,
                total_steps: 2000,
                ..Default::default()
            },
            eval: EvalConfig {
                tasks: 5,
                queries: 4,
                ..Default::default()
            },
            baselines: BaselineConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn arch(&self) -> Arch {
        Arch {
            num_blocks: self.arch.num_blocks,
            channels: self.arch.channels,
            embed_dim: self.arch.embed_dim,
            input: self.data.shape(),
            dense_bias: self.arch.dense_bias,
        }
    }

    /// Parses a document and applies `key.path=value` overrides on top.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = text.parse().context("config is not valid TOML")?;
        let mut doc = toml::Table::try_from(RunConfig::default())?;
        merge(&mut doc, user);
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let merged = toml::to_string(&doc)?;
        let cfg: RunConfig = toml::from_str(&merged).map_err(|e| anyhow!("invalid config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text, overrides).with_context(|| format!("config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Checks values and input paths before anything runs.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.height == 0 || d.width == 0 || d.channels == 0 {
            bail!("data.height, data.width and data.channels must be positive");
        }
        if !(0.0..1.0).contains(&d.train_fraction) || d.train_fraction == 0.0 {
            bail!("data.train_fraction must lie in (0, 1)");
        }
        match d.source {
            DataSource::Synthetic => {
                if d.synthetic.domains == 0 {
                    bail!("data.synthetic.domains must be at least 1");
                }
            }
            _ => {
                if d.roots.is_empty() {
                    bail!("data.roots must name at least one pool directory");
                }
                for r in &d.roots {
                    if !r.is_dir() {
                        bail!("data.roots: {} is not a directory", r.display());
                    }
                }
            }
        }
        self.arch().validate().context("arch")?;
        self.generator.validate().context("generator")?;
        self.train.validate().context("train")?;
        self.eval.validate().context("eval")?;
        if self.train.way > self.generator.max_way {
            bail!(
                "train.way {} exceeds generator.max_way {}",
                self.train.way,
                self.generator.max_way
            );
        }
        if self.baselines.constpn_way_multiplier == 0 {
            bail!("baselines.constpn_way_multiplier must be at least 1");
        }
        Ok(())
    }
}

/// Recursively overlays `top` on `base`; tables merge, anything else replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        let k = canonical_key(&k).to_string();
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c = value` in `doc`. The value is read as a TOML literal and
/// falls back to a plain string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key.path=value"))?;
    let key = key.trim();
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty component");
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().unwrap();
    let mut table = doc;
    for (i, p) in parents.iter().enumerate() {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{key}`: `{}` is not a table", path[..=i].join(".")))?;
    }
    table.insert(canonical_key(last).to_string(), value);
    Ok(())
}

/// `T` is accepted as shorthand for `tasks`.
fn canonical_key(k: &str) -> &str {
    if k == "T" {
        "tasks"
    } else {
        k
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Output root: `$CHT_RUN_DIR` or `./runs`.
pub fn run_root() -> PathBuf {
    std::env::var_os("CHT_RUN_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}
