//! Running experiments and writing their artifacts.
//!
//! Layout of an artifact directory:
//!
//! ```text
//! config.toml        resolved configuration
//! seeds.json         training and scenario seed of every repeat
//! version.json       crate versions that produced the artifacts
//! summary.json       per-seed records and mean ± std of test metrics
//! seed_<s>/history.jsonl
//! seed_<s>/eval_valid.json, eval_test.json, eval.csv, run.json
//! seed_<s>/checkpoints/round_NNN.ckpt   (when enabled)
//! ```
//!
//! A sweep writes one such directory per grid point under `sweep/` and a
//! `sweep.json` index at the top.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fedcsr::datasets::{generate_synthetic, ingest_amazon, preprocess, DomainDataset};
use fedcsr::evaluation::{EvalResult, FusionMode, Metrics, Split, CSV_HEADER};
use fedcsr::federation::{build_clients, run_federated, RunOptions, RunOutcome};
use fedcsr::seed::repeat_seeds;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ScenarioSource, SweepPoint};
use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const SEEDS_FILE: &str = "seeds.json";
pub const VERSION_FILE: &str = "version.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_FILE: &str = "sweep.json";

/// Seeds of every repeat. Synthetic data is regenerated per repeat from its
/// own seed; ingested data is the same for every repeat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedList {
    pub train: Vec<u64>,
    pub scenario: Option<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VersionStamp {
    pub fedcsr: String,
    pub fedcsr_cli: String,
}

impl VersionStamp {
    pub fn current() -> Self {
        Self {
            fedcsr: fedcsr::VERSION.to_owned(),
            fedcsr_cli: env!("CARGO_PKG_VERSION").to_owned(),
        }
    }
}

/// What one seeded run produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub rounds_run: usize,
    pub best_round: usize,
    pub valid_curve: Vec<f64>,
    pub messages: usize,
    pub valid: BTreeMap<FusionMode, EvalResult>,
    pub test: BTreeMap<FusionMode, EvalResult>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mrr: MeanStd,
    pub hr_at_k: MeanStd,
    pub ndcg_at_k: MeanStd,
}

impl MetricStats {
    pub fn of(metrics: &[Metrics]) -> Self {
        let pick = |f: fn(&Metrics) -> f64| MeanStd::of(&metrics.iter().map(f).collect::<Vec<_>>());
        Self {
            mrr: pick(|m| m.mrr),
            hr_at_k: pick(|m| m.hr_at_k),
            ndcg_at_k: pick(|m| m.ndcg_at_k),
        }
    }
}

/// Test metrics of one fusion mode across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub per_domain: BTreeMap<String, MetricStats>,
    pub average: MetricStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub variant: String,
    pub k: usize,
    pub runs: Vec<RunRecord>,
    pub test: BTreeMap<FusionMode, ModeSummary>,
}

impl Summary {
    pub fn from_runs(variant: String, k: usize, runs: Vec<RunRecord>) -> Self {
        let mut test = BTreeMap::new();
        let modes: Vec<FusionMode> = runs
            .first()
            .map(|r| r.test.keys().copied().collect())
            .unwrap_or_default();
        for mode in modes {
            let results: Vec<&EvalResult> = runs.iter().filter_map(|r| r.test.get(&mode)).collect();
            let domains: Vec<&String> = results
                .first()
                .map(|r| r.per_domain.keys().collect())
                .unwrap_or_default();
            let per_domain = domains
                .into_iter()
                .map(|d| {
                    let ms: Vec<Metrics> = results.iter().filter_map(|r| r.per_domain.get(d).copied()).collect();
                    (d.clone(), MetricStats::of(&ms))
                })
                .collect();
            let avg: Vec<Metrics> = results.iter().map(|r| r.average).collect();
            test.insert(
                mode,
                ModeSummary {
                    per_domain,
                    average: MetricStats::of(&avg),
                },
            );
        }
        Self { variant, k, runs, test }
    }

    /// Average test MRR of `mode` for every seed, in run order.
    pub fn seed_mrr(&self, mode: FusionMode) -> Vec<f64> {
        self.runs
            .iter()
            .map(|r| r.test.get(&mode).map(|e| e.average.mrr).unwrap_or(f64::NAN))
            .collect()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY_FILE))?)?)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub summary: Summary,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Domains of one repeat.
fn load_domains(source: &ScenarioSource, scenario_seed: Option<u64>) -> Result<Vec<DomainDataset>> {
    match source {
        ScenarioSource::Synthetic(s) => {
            let mut s = s.clone();
            if let Some(seed) = scenario_seed {
                s.seed = seed;
            }
            Ok(generate_synthetic(&s)?)
        }
        ScenarioSource::Amazon(a) => ingest_amazon(&a.dir, &a.domains)?
            .into_iter()
            .map(|d| {
                if d.skipped_rows > 0 {
                    log::warn!("{}: skipped {} malformed rows", d.dataset.domain_name, d.skipped_rows);
                }
                Ok(preprocess(&d.dataset, &a.preprocess)?)
            })
            .collect(),
    }
}

fn seed_list(cfg: &ExperimentConfig) -> SeedList {
    SeedList {
        train: repeat_seeds(cfg.train.seed, cfg.repeats),
        scenario: match &cfg.scenario {
            ScenarioSource::Synthetic(s) => Some(repeat_seeds(s.seed, cfg.repeats)),
            ScenarioSource::Amazon(_) => None,
        },
    }
}

fn record(seed: u64, out: &RunOutcome) -> RunRecord {
    RunRecord {
        seed,
        rounds_run: out.rounds_run,
        best_round: out.best_round,
        valid_curve: out.valid_curve.clone(),
        messages: out.messages,
        valid: out.valid_at_best.clone(),
        test: out.test_at_best.clone(),
    }
}

fn write_eval_csv(path: &Path, rec: &RunRecord) -> Result<()> {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for (split, results) in [(Split::Valid, &rec.valid), (Split::Test, &rec.test)] {
        for r in results.values() {
            for row in r.csv_rows(rec.best_round, split) {
                text.push_str(&row);
                text.push('\n');
            }
        }
    }
    fs::write(path, text)?;
    Ok(())
}

/// Trains every seeded repeat of `cfg` and writes the artifact directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let dir = cfg.artifact_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    let seeds = seed_list(cfg);
    write_json(&dir.join(SEEDS_FILE), &seeds)?;
    write_json(&dir.join(VERSION_FILE), &VersionStamp::current())?;

    let fixed_data = match cfg.scenario {
        ScenarioSource::Amazon(_) => Some(load_domains(&cfg.scenario, None)?),
        ScenarioSource::Synthetic(_) => None,
    };
    let mut runs = Vec::with_capacity(cfg.repeats);
    for (i, &seed) in seeds.train.iter().enumerate() {
        let domains = match &fixed_data {
            Some(d) => d.clone(),
            None => load_domains(&cfg.scenario, seeds.scenario.as_ref().map(|s| s[i]))?,
        };
        let mut train = cfg.train.clone();
        train.seed = seed;
        let run_dir = dir.join(format!("seed_{seed}"));
        fs::create_dir_all(&run_dir)?;
        let opts = RunOptions {
            checkpoint_dir: cfg.checkpoints.then(|| run_dir.join("checkpoints")),
            history_path: Some(run_dir.join("history.jsonl")),
        };
        if let Some(c) = &opts.checkpoint_dir {
            fs::create_dir_all(c)?;
        }
        log::info!("{}: repeat {}/{} (seed {seed})", cfg.variant(), i + 1, cfg.repeats);
        let mut clients = build_clients(domains, &train)?;
        let out = run_federated(&mut clients, &train, &opts)?;
        let rec = record(seed, &out);
        write_json(&run_dir.join("eval_valid.json"), &rec.valid)?;
        write_json(&run_dir.join("eval_test.json"), &rec.test)?;
        write_eval_csv(&run_dir.join("eval.csv"), &rec)?;
        write_json(&run_dir.join("run.json"), &rec)?;
        runs.push(rec);
    }
    let summary = Summary::from_runs(cfg.variant().name().to_owned(), cfg.train.eval_k, runs);
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(ExperimentOutcome { dir, summary })
}

/// One grid point of a sweep and its summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub point: SweepPoint,
    /// Directory relative to the sweep root.
    pub dir: PathBuf,
    /// Fused-representation test metrics across seeds.
    pub test: MetricStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepIndex {
    pub swept: Vec<String>,
    pub entries: Vec<SweepEntry>,
}

impl SweepIndex {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(SWEEP_FILE))?)?)
    }
}

/// Runs [`run_experiment`] at every point of the configured grid.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<(PathBuf, SweepIndex)> {
    cfg.validate()?;
    let points = cfg.sweep.points();
    if points.is_empty() {
        return Err(CliError::Config("the configuration has no [sweep] grid".into()));
    }
    let dir = cfg.artifact_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    write_json(&dir.join(SEEDS_FILE), &seed_list(cfg))?;
    write_json(&dir.join(VERSION_FILE), &VersionStamp::current())?;
    let mut entries = Vec::with_capacity(points.len());
    for p in points {
        let rel = PathBuf::from("sweep").join(p.label());
        let mut child = cfg.clone();
        child.sweep = Default::default();
        child.train.weights = p.apply(&cfg.train.weights);
        child.output_dir = dir.join(&rel);
        let out = run_experiment(&child)?;
        let test = out
            .summary
            .test
            .get(&FusionMode::Both)
            .map(|m| m.average)
            .unwrap_or_default();
        entries.push(SweepEntry {
            point: p,
            dir: rel,
            test,
        });
    }
    let index = SweepIndex {
        swept: cfg.sweep.swept().into_iter().map(String::from).collect(),
        entries,
    };
    write_json(&dir.join(SWEEP_FILE), &index)?;
    Ok((dir, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_sample_std() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert!((s.mean - 2.5).abs() < 1e-12);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(MeanStd::of(&[7.0]).std, 0.0);
    }
}
