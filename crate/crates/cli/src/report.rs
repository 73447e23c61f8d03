//! Reports over finished artifact directories: a Markdown summary, a CSV of
//! every metric and SVG plots. Re-running on the same artifacts rewrites
//! byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fedcsr::evaluation::{EvalResult, FusionMode, Split};

use crate::error::{CliError, Result};
use crate::experiment::{
    MeanStd, MetricStats, Summary, SweepIndex, CONFIG_FILE, SEEDS_FILE, SUMMARY_FILE, SWEEP_FILE, VERSION_FILE,
};
use crate::svg::{bar_chart, line_chart, Bar, Series};

pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";
pub const PLOTS_DIR: &str = "plots";

fn require(dir: &Path, files: &[&str]) -> Result<()> {
    let missing: Vec<PathBuf> = files.iter().map(|f| dir.join(f)).filter(|p| !p.exists()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::MissingArtifacts {
            dir: dir.to_owned(),
            files: missing,
        })
    }
}

fn cell(s: &MeanStd) -> String {
    format!("{:.4} ± {:.4}", s.mean, s.std)
}

/// Writes the report for a run or sweep directory and returns the files
/// written.
pub fn emit_report(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(CliError::MissingArtifacts {
            dir: dir.to_owned(),
            files: vec![dir.to_owned()],
        });
    }
    if dir.join(SWEEP_FILE).exists() {
        require(dir, &[CONFIG_FILE, SEEDS_FILE, VERSION_FILE, SWEEP_FILE])?;
        sweep_report(dir, &SweepIndex::load(dir)?)
    } else {
        require(dir, &[CONFIG_FILE, SEEDS_FILE, VERSION_FILE, SUMMARY_FILE])?;
        run_report(dir, &Summary::load(dir)?)
    }
}

/// Markdown table of one fusion mode: a row per domain plus the average.
pub fn markdown_table(summary: &Summary, mode: FusionMode) -> String {
    let mut out = format!(
        "| Domain | MRR | HR@{k} | NDCG@{k} |\n|---|---|---|---|\n",
        k = summary.k
    );
    if let Some(m) = summary.test.get(&mode) {
        let rows = m
            .per_domain
            .iter()
            .map(|(d, s)| (d.as_str(), s))
            .chain([("Avg", &m.average)]);
        for (d, s) in rows {
            let _ = writeln!(
                out,
                "| {d} | {} | {} | {} |",
                cell(&s.mrr),
                cell(&s.hr_at_k),
                cell(&s.ndcg_at_k)
            );
        }
    }
    out
}

fn csv_result_rows(w: &mut csv::Writer<Vec<u8>>, seed: &str, split: Split, r: &EvalResult) -> Result<()> {
    let rows = r
        .per_domain
        .iter()
        .map(|(d, m)| (d.as_str(), m))
        .chain([("Avg", &r.average)]);
    for (d, m) in rows {
        w.write_record([
            seed.to_owned(),
            split.to_string(),
            r.fusion_mode.to_string(),
            d.to_owned(),
            format!("{:.6}", m.mrr),
            format!("{:.6}", m.hr_at_k),
            format!("{:.6}", m.ndcg_at_k),
            r.k.to_string(),
        ])?;
    }
    Ok(())
}

fn run_report(dir: &Path, summary: &Summary) -> Result<Vec<PathBuf>> {
    let n = summary.runs.len();
    let mut md = format!(
        "# {}\n\nTest metrics at the best validation round, mean ± std over {n} seed{}.\n",
        summary.variant,
        if n == 1 { "" } else { "s" }
    );
    for mode in summary.test.keys() {
        let _ = write!(md, "\n## Fusion: {mode}\n\n{}", markdown_table(summary, *mode));
    }
    md.push_str("\n## Runs\n\n| Seed | Rounds | Best round | Messages |\n|---|---|---|---|\n");
    for r in &summary.runs {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} |",
            r.seed, r.rounds_run, r.best_round, r.messages
        );
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "split", "fusion", "domain", "mrr", "hr_at_k", "ndcg_at_k", "k"])?;
    for r in &summary.runs {
        let seed = r.seed.to_string();
        for e in r.valid.values() {
            csv_result_rows(&mut w, &seed, Split::Valid, e)?;
        }
        for e in r.test.values() {
            csv_result_rows(&mut w, &seed, Split::Test, e)?;
        }
    }
    for (mode, m) in &summary.test {
        for (label, pick) in [
            ("mean", (|s: &MeanStd| s.mean) as fn(&MeanStd) -> f64),
            ("std", |s: &MeanStd| s.std),
        ] {
            let rows = m
                .per_domain
                .iter()
                .map(|(d, s)| (d.as_str(), s))
                .chain([("Avg", &m.average)]);
            for (d, s) in rows {
                w.write_record([
                    label.to_owned(),
                    "test".to_owned(),
                    mode.to_string(),
                    d.to_owned(),
                    format!("{:.6}", pick(&s.mrr)),
                    format!("{:.6}", pick(&s.hr_at_k)),
                    format!("{:.6}", pick(&s.ndcg_at_k)),
                    summary.k.to_string(),
                ])?;
            }
        }
    }
    let csv_bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;

    let plots = dir.join(PLOTS_DIR);
    fs::create_dir_all(&plots)?;
    let curves: Vec<Series> = summary
        .runs
        .iter()
        .map(|r| Series {
            name: format!("seed {}", r.seed),
            points: r
                .valid_curve
                .iter()
                .enumerate()
                .map(|(i, &v)| ((i + 1) as f64, v))
                .collect(),
        })
        .collect();
    let valid_svg = line_chart(
        &format!("{}: validation MRR", summary.variant),
        "round",
        "average MRR (fused)",
        &curves,
    );
    let bars: Vec<Bar> = summary
        .test
        .iter()
        .map(|(mode, m)| Bar {
            label: mode.to_string(),
            value: m.average.mrr.mean,
            error: m.average.mrr.std,
        })
        .collect();
    let fusion_svg = bar_chart(
        &format!("{}: test MRR by representation", summary.variant),
        "average MRR",
        &bars,
    );

    let written = vec![
        (dir.join(REPORT_MD), md.into_bytes()),
        (dir.join(REPORT_CSV), csv_bytes),
        (plots.join("valid_mrr.svg"), valid_svg.into_bytes()),
        (plots.join("fusion_modes.svg"), fusion_svg.into_bytes()),
    ];
    write_all(written)
}

fn write_all(files: Vec<(PathBuf, Vec<u8>)>) -> Result<Vec<PathBuf>> {
    files
        .into_iter()
        .map(|(p, bytes)| {
            fs::write(&p, bytes)?;
            Ok(p)
        })
        .collect()
}

fn axis_value(point: &crate::config::SweepPoint, name: &str) -> Option<f64> {
    point.0.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
}

fn sweep_report(dir: &Path, index: &SweepIndex) -> Result<Vec<PathBuf>> {
    let mut md = String::from("# Loss-weight sweep\n\nFused-representation test metrics, mean ± std over seeds.\n\n");
    let head: Vec<&str> = index.swept.iter().map(String::as_str).collect();
    let _ = writeln!(md, "| {} | MRR | HR | NDCG |", head.join(" | "));
    let _ = writeln!(md, "|{}", "---|".repeat(head.len() + 3));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = index.swept.clone();
    header.extend(["mrr_mean", "mrr_std", "hr_mean", "hr_std", "ndcg_mean", "ndcg_std"].map(String::from));
    w.write_record(&header)?;
    for e in &index.entries {
        let vals: Vec<String> = e.point.0.iter().map(|(_, v)| v.to_string()).collect();
        let t = &e.test;
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} |",
            vals.join(" | "),
            cell(&t.mrr),
            cell(&t.hr_at_k),
            cell(&t.ndcg_at_k)
        );
        let mut rec = vals.clone();
        for s in [t.mrr, t.hr_at_k, t.ndcg_at_k] {
            rec.push(format!("{:.6}", s.mean));
            rec.push(format!("{:.6}", s.std));
        }
        w.write_record(&rec)?;
    }
    let csv_bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;

    let plots = dir.join(PLOTS_DIR);
    fs::create_dir_all(&plots)?;
    let mut files = vec![
        (dir.join(REPORT_MD), md.into_bytes()),
        (dir.join(REPORT_CSV), csv_bytes),
    ];
    for axis in &index.swept {
        // hold every other swept weight at the first value of its grid
        let first: Vec<(String, f64)> = index
            .swept
            .iter()
            .filter(|n| *n != axis)
            .filter_map(|n| {
                index
                    .entries
                    .first()
                    .and_then(|e| axis_value(&e.point, n))
                    .map(|v| (n.clone(), v))
            })
            .collect();
        let slice: Vec<(f64, &MetricStats)> = index
            .entries
            .iter()
            .filter(|e| first.iter().all(|(n, v)| axis_value(&e.point, n) == Some(*v)))
            .filter_map(|e| axis_value(&e.point, axis).map(|x| (x, &e.test)))
            .collect();
        let series = [("MRR", 0), ("HR", 1), ("NDCG", 2)]
            .into_iter()
            .map(|(name, i)| Series {
                name: name.to_owned(),
                points: slice
                    .iter()
                    .map(|(x, t)| (*x, [t.mrr, t.hr_at_k, t.ndcg_at_k][i].mean))
                    .collect(),
            })
            .collect::<Vec<_>>();
        let svg = line_chart(&format!("Sensitivity to {axis}"), axis, "test metric (fused)", &series);
        files.push((plots.join(format!("sweep_{axis}.svg")), svg.into_bytes()));
    }
    write_all(files)
}
