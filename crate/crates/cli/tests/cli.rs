//! End-to-end behaviour of the `fedcsr` binary and the report emitter on a
//! tiny synthetic scenario.

use std::fs;
use std::path::Path;
use std::process::Command;

use fedcsr::evaluation::FusionMode;
use fedcsr_cli::invariants::check_run_dir;
use fedcsr_cli::{emit_report, run_experiment, CliError, ExperimentConfig, Summary, OUTPUT_ROOT_ENV};

const TINY: &str = r#"
output_dir = "tiny"
repeats = 2
checkpoints = true

[scenario.synthetic]
num_domains = 2
users = 24
vocab_per_domain = 24
shared_factors = 3
exclusive_factors = 3
seq_len_range = [6, 10]

[train]
rounds = 2
local_epochs = 1
negatives_per_eval = 10

[train.model]
dim = 8
max_len = 10
gnn_layers = 1
attn_layers = 1
heads = 2
ffn_dim = 8
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fedcsr"));
    c.env("RUST_LOG", "warn");
    c
}

fn tiny_config(root: &Path, extra: &str) -> std::path::PathBuf {
    let path = root.join("tiny.toml");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

#[test]
fn run_writes_artifacts_and_report_is_idempotent() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path(), "");
    let status = bin()
        .arg("run")
        .arg(&cfg)
        .env(OUTPUT_ROOT_ENV, root.path())
        .status()
        .unwrap();
    assert!(status.success());

    let dir = root.path().join("tiny");
    assert!(check_run_dir(&dir).is_empty(), "{:?}", check_run_dir(&dir));
    let summary = Summary::load(&dir).unwrap();
    assert_eq!(summary.runs.len(), 2);
    assert_ne!(summary.runs[0].seed, summary.runs[1].seed);
    assert!(summary.test.contains_key(&FusionMode::Both));
    let first = summary.runs[0].seed;
    assert!(dir.join(format!("seed_{first}/checkpoints/round_001.ckpt")).is_file());
    for f in [
        "report.md",
        "report.csv",
        "plots/valid_mrr.svg",
        "plots/fusion_modes.svg",
    ] {
        assert!(dir.join(f).is_file(), "{f}");
    }

    let before: Vec<Vec<u8>> = ["report.md", "report.csv", "plots/valid_mrr.svg"]
        .iter()
        .map(|f| fs::read(dir.join(f)).unwrap())
        .collect();
    let out = bin().arg("report").arg(&dir).output().unwrap();
    assert!(out.status.success());
    let after: Vec<Vec<u8>> = ["report.md", "report.csv", "plots/valid_mrr.svg"]
        .iter()
        .map(|f| fs::read(dir.join(f)).unwrap())
        .collect();
    assert_eq!(before, after);

    let md = String::from_utf8(before[0].clone()).unwrap();
    assert!(md.contains("| Avg |") && md.contains("NDCG@10"));
}

#[test]
fn identical_configs_reproduce_identical_summaries() {
    let root = tempfile::tempdir().unwrap();
    let mut a = ExperimentConfig::from_toml(TINY, &["repeats=1".into(), "checkpoints=false".into()]).unwrap();
    a.output_dir = root.path().join("a");
    let mut b = a.clone();
    b.output_dir = root.path().join("b");
    let sa = run_experiment(&a).unwrap().summary;
    let sb = run_experiment(&b).unwrap().summary;
    assert_eq!(sa, sb);
    let seed = sa.runs[0].seed;
    let history = |d: &str| fs::read(root.path().join(d).join(format!("seed_{seed}/history.jsonl"))).unwrap();
    assert_eq!(history("a"), history("b"));
}

#[test]
fn variant_resolution_changes_nothing_else() {
    let base = ExperimentConfig::from_toml(TINY, &[]).unwrap();
    let other = ExperimentConfig::from_toml(TINY, &["variant=feddcsr_no_srd_cim".into()]).unwrap();
    let mut normalised = other.clone();
    normalised.variant = base.variant;
    normalised.train.variant = base.train.variant;
    assert_eq!(normalised, base);
    assert_ne!(other, base);
}

#[test]
fn report_names_missing_artifacts() {
    let root = tempfile::tempdir().unwrap();
    fs::write(root.path().join("config.toml"), TINY).unwrap();
    match emit_report(root.path()) {
        Err(CliError::MissingArtifacts { files, .. }) => {
            let names: Vec<String> = files
                .iter()
                .map(|f| f.file_name().unwrap().to_string_lossy().into_owned())
                .collect();
            assert_eq!(names, ["seeds.json", "version.json", "summary.json"]);
        }
        other => panic!("expected missing artifacts, got {other:?}"),
    }
    let out = bin().arg("report").arg(root.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("summary.json"));
}

#[test]
fn invalid_configuration_exits_with_two_before_training() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path(), "");
    for set in ["train.local_epochs=0", "train.weights.gamma=-1", "variant=bogus"] {
        let out = bin()
            .arg("run")
            .arg(&cfg)
            .args(["--set", set])
            .env(OUTPUT_ROOT_ENV, root.path())
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(2), "{set}");
    }
    assert!(!root.path().join("tiny").exists());
}

#[test]
fn oracle_check_passes() {
    let out = bin().arg("oracle-check").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 9 && text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn sweep_covers_the_grid_and_plots_each_axis() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(root.path(), "\n[sweep]\nbeta = [0.0, 1.0]\n");
    let out = bin()
        .arg("sweep")
        .arg(&cfg)
        .args([
            "--set",
            "repeats=1",
            "--set",
            "checkpoints=false",
            "--set",
            "train.rounds=1",
        ])
        .env(OUTPUT_ROOT_ENV, root.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = root.path().join("tiny");
    let index = fedcsr_cli::SweepIndex::load(&dir).unwrap();
    assert_eq!(index.swept, ["beta"]);
    assert_eq!(index.entries.len(), 2);
    assert!(dir.join("plots/sweep_beta.svg").is_file());
    let csv = fs::read_to_string(dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
