//! Structural checks on a finished artifact directory. The CLI exits
//! non-zero when any of them fails.

use std::fs;
use std::path::Path;

use fedcsr::evaluation::{EvalResult, Metrics};
use fedcsr::federation::HistoryRecord;

use crate::experiment::{Summary, SweepIndex, CONFIG_FILE, SEEDS_FILE, SUMMARY_FILE, SWEEP_FILE, VERSION_FILE};

const RUN_FILES: [&str; 5] = [
    "history.jsonl",
    "eval_valid.json",
    "eval_test.json",
    "eval.csv",
    "run.json",
];

fn metrics_ok(m: &Metrics) -> bool {
    [m.mrr, m.hr_at_k, m.ndcg_at_k]
        .iter()
        .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
        && m.ndcg_at_k <= m.hr_at_k + 1e-12
}

fn result_ok(r: &EvalResult) -> bool {
    !r.per_domain.is_empty() && r.per_domain.values().all(metrics_ok) && metrics_ok(&r.average)
}

/// Violations found in a run directory; empty when everything holds.
pub fn check_run_dir(dir: &Path) -> Vec<String> {
    let mut bad = Vec::new();
    for f in [CONFIG_FILE, SEEDS_FILE, VERSION_FILE, SUMMARY_FILE] {
        if !dir.join(f).is_file() {
            bad.push(format!("{}: missing", dir.join(f).display()));
        }
    }
    let summary = match Summary::load(dir) {
        Ok(s) => s,
        Err(e) => {
            bad.push(format!("{}: {e}", dir.join(SUMMARY_FILE).display()));
            return bad;
        }
    };
    if summary.runs.is_empty() {
        bad.push("summary lists no runs".into());
    }
    for run in &summary.runs {
        let run_dir = dir.join(format!("seed_{}", run.seed));
        for f in RUN_FILES {
            if !run_dir.join(f).is_file() {
                bad.push(format!("{}: missing", run_dir.join(f).display()));
            }
        }
        if run.valid_curve.len() != run.rounds_run || run.best_round >= run.rounds_run.max(1) {
            bad.push(format!(
                "seed {}: {} rounds but {} curve points and best round {}",
                run.seed,
                run.rounds_run,
                run.valid_curve.len(),
                run.best_round
            ));
        }
        if !run.valid.values().chain(run.test.values()).all(result_ok) || run.test.is_empty() {
            bad.push(format!(
                "seed {}: metrics missing, non-finite or outside [0, 1]",
                run.seed
            ));
        }
        let clients = run.test.values().next().map_or(0, |r| r.per_domain.len());
        if let Ok(text) = fs::read_to_string(run_dir.join("history.jsonl")) {
            let records: Result<Vec<HistoryRecord>, _> = text.lines().map(serde_json::from_str).collect();
            match records {
                Ok(records) => {
                    if records.len() != run.rounds_run * clients {
                        bad.push(format!(
                            "seed {}: {} history records for {} rounds of {clients} clients",
                            run.seed,
                            records.len(),
                            run.rounds_run
                        ));
                    }
                    if records.iter().any(|r| !r.total_loss.is_finite()) {
                        bad.push(format!("seed {}: non-finite training loss", run.seed));
                    }
                }
                Err(e) => bad.push(format!("seed {}: unreadable history: {e}", run.seed)),
            }
        }
    }
    bad
}

/// Violations of a sweep directory and every grid point below it.
pub fn check_sweep_dir(dir: &Path) -> Vec<String> {
    match SweepIndex::load(dir) {
        Ok(index) => index
            .entries
            .iter()
            .flat_map(|e| check_run_dir(&dir.join(&e.dir)))
            .collect(),
        Err(e) => vec![format!("{}: {e}", dir.join(SWEEP_FILE).display())],
    }
}
