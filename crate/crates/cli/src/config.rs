use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use attnshort::harness::ExperimentConfig;
use clap::{Args, ValueEnum};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Library defaults.
    Default,
    /// Small enough to run every recipe in seconds to minutes on one core.
    Desk,
}

/// Flags shared by every subcommand; each one overrides a config key.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// JSON file with ExperimentConfig fields; missing keys keep the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Set any key by dotted path, e.g. `--set encoder.num_layers=4`.
    /// Values are parsed as JSON, falling back to a plain string.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long, global = true)]
    pub name: Option<String>,
    /// Dataset path or `synthetic`.
    #[arg(long, global = true)]
    pub dataset: Option<String>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub layer: Option<usize>,
    #[arg(long, global = true)]
    pub keep_fraction: Option<f64>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = cur.as_object_mut().with_context(|| format!("`{path}`: `{}` is not an object", keys[..i].join(".")))?;
        if !obj.contains_key(*key) {
            bail!("unknown config key `{path}`");
        }
        cur = obj.get_mut(*key).expect("checked above");
    }
    *cur = value;
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let preset = match self.preset {
            Preset::Default => ExperimentConfig::default(),
            Preset::Desk => ExperimentConfig::desk_scale(),
        };
        let mut value = serde_json::to_value(preset)?;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if !patch.is_object() {
                bail!("{} must contain a JSON object", path.display());
            }
            merge(&mut value, patch);
        }

        let mut overrides: Vec<(&str, Value)> = Vec::new();
        if let Some(v) = &self.name {
            overrides.push(("name", Value::from(v.as_str())));
        }
        if let Some(v) = &self.dataset {
            overrides.push(("dataset", Value::from(v.as_str())));
        }
        if let Some(v) = &self.output_dir {
            overrides.push(("output_dir", Value::from(v.to_string_lossy().as_ref())));
        }
        if let Some(v) = &self.seeds {
            overrides.push(("seeds", serde_json::to_value(v)?));
        }
        if let Some(v) = self.epochs {
            overrides.push(("train.epochs", Value::from(v)));
        }
        if let Some(v) = self.learning_rate {
            overrides.push(("train.learning_rate", Value::from(v)));
        }
        if let Some(v) = self.layer {
            overrides.push(("filter.layer", Value::from(v)));
        }
        if let Some(v) = self.keep_fraction {
            overrides.push(("filter.keep_fraction", Value::from(v)));
        }
        if let Some(v) = &self.fractions {
            overrides.push(("fractions", serde_json::to_value(v)?));
        }
        for (k, v) in overrides {
            set_path(&mut value, k, v)?;
        }
        for s in &self.sets {
            let (k, v) = s.split_once('=').with_context(|| format!("`--set {s}`: expected KEY=VALUE"))?;
            set_path(&mut value, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(value).context("invalid configuration")?;
        Ok(cfg)
    }
}

pub fn output_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    let dir = Path::new(&cfg.output_dir);
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}
