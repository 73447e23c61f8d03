//! Experiment files.
//!
//! An experiment is one TOML document: a data source (`[scenario.synthetic]`
//! or `[scenario.amazon]`), the training setup (`[train]`), the variant, an
//! optional grid over the loss weights (`[sweep]`), the artifact directory
//! and the number of seeded repeats. Any leaf can be overridden from the
//! command line with `--set a.b=value`, where `value` is a TOML literal
//! (bare words fall back to strings).

use std::path::{Path, PathBuf};

use fedcsr::datasets::{PreprocessConfig, ScenarioConfig};
use fedcsr::federation::{TrainConfig, Variant};
use fedcsr::srd::LossWeights;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Relative `output_dir` values are resolved under this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "FEDCSR_OUTPUT_ROOT";

/// Where the interaction data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum ScenarioSource {
    Synthetic(ScenarioConfig),
    Amazon(AmazonSource),
}

/// Raw dumps in `<dir>/<domain>.csv` or `<dir>/<domain>.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmazonSource {
    pub dir: PathBuf,
    pub domains: Vec<String>,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
}

/// Loss weights to sweep; an empty list leaves the weight at its
/// configured value. The grid is the Cartesian product of the lists.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub lambda: Vec<f64>,
    pub tau: Vec<f64>,
}

/// One grid point: `(weight name, value)` pairs in a fixed order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint(pub Vec<(String, f64)>);

impl SweepPoint {
    pub fn apply(&self, w: &LossWeights) -> LossWeights {
        let mut out = *w;
        for (name, v) in &self.0 {
            match name.as_str() {
                "alpha" => out.alpha = *v,
                "beta" => out.beta = *v,
                "gamma" => out.gamma = *v,
                "lambda" => out.lambda_ = *v,
                "tau" => out.tau = *v,
                _ => unreachable!("sweep axes are fixed"),
            }
        }
        out
    }

    /// Directory-safe label such as `alpha=0.5,beta=2`.
    pub fn label(&self) -> String {
        self.0
            .iter()
            .map(|(n, v)| format!("{n}={v}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl SweepConfig {
    pub fn is_empty(&self) -> bool {
        self.axes().iter().all(|(_, v)| v.is_empty())
    }

    fn axes(&self) -> [(&'static str, &Vec<f64>); 5] {
        [
            ("alpha", &self.alpha),
            ("beta", &self.beta),
            ("gamma", &self.gamma),
            ("lambda", &self.lambda),
            ("tau", &self.tau),
        ]
    }

    /// Names of the swept weights.
    pub fn swept(&self) -> Vec<&'static str> {
        self.axes()
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(n, _)| n)
            .collect()
    }

    pub fn points(&self) -> Vec<SweepPoint> {
        let mut points = vec![Vec::new()];
        for (name, values) in self.axes() {
            if values.is_empty() {
                continue;
            }
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push((name.to_owned(), v));
                        q
                    })
                })
                .collect();
        }
        if self.is_empty() {
            return Vec::new();
        }
        points.into_iter().map(SweepPoint).collect()
    }

    fn validate(&self, base: &LossWeights) -> Result<()> {
        for p in self.points() {
            p.apply(base)
                .validate()
                .map_err(|e| CliError::Config(format!("sweep point {}: {e}", p.label())))?;
        }
        Ok(())
    }
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSource,
    #[serde(default)]
    pub train: TrainConfig,
    /// Overrides `train.variant` when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    #[serde(default, skip_serializing_if = "SweepConfig::is_empty")]
    pub sweep: SweepConfig,
    pub output_dir: PathBuf,
    /// Seeded repetitions of every run.
    #[serde(default = "one")]
    pub repeats: usize,
    /// Write a checkpoint archive after every round.
    #[serde(default)]
    pub checkpoints: bool,
}

impl ExperimentConfig {
    /// Synthetic experiment with the desk-scale defaults.
    pub fn synthetic(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            scenario: ScenarioSource::Synthetic(ScenarioConfig::default()),
            train: TrainConfig::default(),
            variant: None,
            sweep: SweepConfig::default(),
            output_dir: output_dir.into(),
            repeats: 1,
            checkpoints: false,
        }
    }

    /// Parses TOML text, applies `key=value` overrides, resolves the variant
    /// and validates everything before any training starts.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.resolved()
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Copies the top-level variant into `train` and validates.
    pub fn resolved(mut self) -> Result<Self> {
        if let Some(v) = self.variant {
            if self.train.variant != v && self.train.variant != Variant::default() {
                return Err(CliError::Config(format!(
                    "variant `{v}` conflicts with train.variant `{}`",
                    self.train.variant
                )));
            }
            self.train.variant = v;
        }
        self.variant = Some(self.train.variant);
        self.validate()?;
        Ok(self)
    }

    pub fn variant(&self) -> Variant {
        self.train.variant
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(CliError::Config("repeats must be at least 1".into()));
        }
        self.train.validate()?;
        match &self.scenario {
            ScenarioSource::Synthetic(s) => s.validate()?,
            ScenarioSource::Amazon(a) => {
                if a.domains.is_empty() {
                    return Err(CliError::Config("amazon source lists no domains".into()));
                }
            }
        }
        self.sweep.validate(&self.train.weights)
    }

    /// `output_dir`, placed under `$FEDCSR_OUTPUT_ROOT` when relative.
    pub fn artifact_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

/// Sets `a.b.c = value` in `table`, creating intermediate tables.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override `{spec}` has an empty key segment")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("split yields one segment");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{spec}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}
