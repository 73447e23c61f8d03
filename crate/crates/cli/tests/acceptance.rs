//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1 to 5 are exact properties of the implementation and fail the
//! process. Criteria 6 to 8 are directional comparisons between trained
//! variants on the default synthetic preset (5 seeds each). Their verdicts
//! are printed and written to `acceptance.md` next to the run artifacts, but
//! only fail the process when `FEDCSR_STRICT_ACCEPTANCE=1`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use fedcsr::datasets::{generate_synthetic, ItemGraph, ScenarioConfig, UserId};
use fedcsr::encoder::{encode, init_params, SequenceBatch};
use fedcsr::evaluation::{rank_of_target, FusionMode};
use fedcsr::federation::{
    aggregate_params, aggregate_representations, build_clients, privacy_violations, run_federated, ModelConfig,
    RoundMessage, RunOptions, TrainConfig, UpMessage, Variant,
};
use fedcsr::gradcheck::check_all;
use fedcsr::params::ParamSet;
use fedcsr::Tensor;
use fedcsr_cli::{run_experiment, ExperimentConfig, ScenarioSource, Summary};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STRICT_ENV: &str = "FEDCSR_STRICT_ACCEPTANCE";
const SEEDS: usize = 5;
const BASE_SEED: u64 = 0;

const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const ORACLE_BUDGET: Duration = Duration::from_secs(5);
const RANK_VECTORS: usize = 1000;
const ORDERING_BUDGET: Duration = Duration::from_secs(30 * 60);
const HETEROGENEOUS: f64 = 0.6;
const MIN_SEED_WINS: usize = 4;
const DEGENERACY_TOL: f64 = 0.10;

struct Verdict {
    id: usize,
    title: &'static str,
    pass: bool,
    detail: String,
    directional: bool,
}

impl Verdict {
    fn line(&self) -> String {
        format!(
            "{} [{}] {}: {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.detail
        )
    }
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let checks: Vec<_> = [0, 1].into_iter().flat_map(|s| check_all(s, GRAD_STEP)).collect();
    let elapsed = start.elapsed();
    let worst = checks
        .iter()
        .max_by(|a, b| a.worst_error.total_cmp(&b.worst_error))
        .expect("at least one term");
    Verdict {
        id: 1,
        title: "gradient correctness",
        pass: checks.iter().all(|c| c.worst_error < GRAD_TOL) && elapsed < GRAD_BUDGET,
        detail: format!(
            "{} term checks, worst relative error {:.2e} ({:?} on `{}`), tolerance {GRAD_TOL:.0e}, {:.1} s",
            checks.len(),
            worst.worst_error,
            worst.term,
            worst.worst_group,
            elapsed.as_secs_f64()
        ),
        directional: false,
    }
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_fedcsr"))
        .arg("oracle-check")
        .env("RUST_LOG", "warn")
        .output();
    let elapsed = start.elapsed();
    let (pass, detail) = match out {
        Ok(out) => {
            let text = String::from_utf8_lossy(&out.stdout);
            let total = text.lines().count();
            let passed = text.lines().filter(|l| l.starts_with("PASS")).count();
            (
                out.status.success() && total > 0 && passed == total && elapsed < ORACLE_BUDGET,
                format!(
                    "{passed}/{total} oracles within 1e-6, exit {:?}, {:.2} s",
                    out.status.code(),
                    elapsed.as_secs_f64()
                ),
            )
        }
        Err(e) => (false, format!("could not start the binary: {e}")),
    };
    Verdict {
        id: 2,
        title: "closed-form oracles",
        pass,
        detail,
        directional: false,
    }
}

/// Position of the target after a full descending sort with the target
/// placed behind every tie.
fn rank_by_sorting(scores: &[f64], target: usize, negatives: &[usize]) -> usize {
    let mut cands: Vec<(f64, bool)> = negatives.iter().map(|&n| (scores[n], false)).collect();
    cands.push((scores[target], true));
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    1 + cands.iter().position(|c| c.1).expect("target present")
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..RANK_VECTORS {
        let vocab = rng.gen_range(2..=20);
        // coarse grid so ties are frequent
        let scores: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0..6) as f64 * 0.5).collect();
        let target = rng.gen_range(0..vocab);
        let negatives: Vec<usize> = (0..vocab).filter(|&i| i != target && rng.gen_bool(0.7)).collect();
        if rank_of_target(&scores, target, &negatives) != rank_by_sorting(&scores, target, &negatives) {
            mismatches += 1;
        }
    }
    Verdict {
        id: 3,
        title: "ranking oracle equivalence",
        pass: mismatches == 0,
        detail: format!("{mismatches} mismatches over {RANK_VECTORS} score vectors"),
        directional: false,
    }
}

fn upload(id: usize, count: usize, value: f64) -> UpMessage {
    UpMessage {
        client_id: id,
        shared_params: ParamSet::from_named([("w".to_owned(), Tensor::full(2, 3, value))]),
        rep_table: [(UserId::from("u"), Tensor::full(4, 2, value))].into(),
        sample_count: count,
    }
}

fn tiny_scenario(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        num_domains: 2,
        users: 24,
        vocab_per_domain: 24,
        shared_factors: 3,
        exclusive_factors: 3,
        seq_len_range: (6, 10),
        heterogeneity: 0.5,
        seed,
        ..ScenarioConfig::default()
    }
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        rounds: 2,
        local_epochs: 1,
        patience: 10,
        batch_size: 8,
        negatives_per_eval: 10,
        model: ModelConfig {
            dim: 8,
            max_len: 10,
            gnn_layers: 1,
            attn_layers: 1,
            heads: 2,
            ffn_dim: 8,
        },
        ..TrainConfig::default()
    }
}

fn criterion_4() -> fedcsr::Result<Verdict> {
    let mut failures = Vec::new();
    let single = upload(0, 7, 1.25);
    if aggregate_params(std::slice::from_ref(&single))? != single.shared_params {
        failures.push("identity");
    }
    let sym = aggregate_params(&[upload(0, 5, 2.5), upload(1, 5, -2.5)])?;
    if sym.get("w").is_none_or(|t| t.data().iter().any(|v| v.abs() > 1e-12)) {
        failures.push("symmetry");
    }
    let ups = [upload(0, 1, 0.0), upload(1, 3, 4.0)];
    let mean = aggregate_params(&ups)?;
    let reps = aggregate_representations(&ups)?;
    let weighted = |t: &Tensor| t.data().iter().all(|v| (v - 3.0).abs() <= 1e-12);
    if !mean.get("w").is_some_and(weighted) || !reps.get(&UserId::from("u")).is_some_and(weighted) {
        failures.push("weighted mean");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut many: Vec<UpMessage> = (0..5)
        .map(|i| upload(i, rng.gen_range(1..50), rng.gen_range(-3.0..3.0)))
        .collect();
    let (p0, r0) = (aggregate_params(&many)?, aggregate_representations(&many)?);
    for _ in 0..10 {
        many.shuffle(&mut rng);
        if aggregate_params(&many)? != p0 || aggregate_representations(&many)? != r0 {
            failures.push("permutation invariance");
            break;
        }
    }
    // every message of a real run, for both message directions
    let mut leaks = 0;
    for variant in [Variant::Feddcsr, Variant::FedavgMonolithic] {
        let train = TrainConfig {
            variant,
            ..tiny_train()
        };
        let mut clients = build_clients(generate_synthetic(&tiny_scenario(0))?, &train)?;
        let out = run_federated(&mut clients, &train, &RunOptions::default())?;
        leaks += privacy_violations(&RoundMessage::Down(out.global.broadcast()))?.len();
        for c in &clients {
            leaks += privacy_violations(&RoundMessage::Up(c.upload()?))?.len();
        }
    }
    if leaks > 0 {
        failures.push("privacy");
    }
    Ok(Verdict {
        id: 4,
        title: "protocol invariants",
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "identity, symmetry, weighted mean, permutation invariance and privacy hold".into()
        } else {
            format!("violated: {} ({leaks} privacy findings)", failures.join(", "))
        },
        directional: false,
    })
}

fn criterion_5(scratch: &Path) -> fedcsr::Result<Verdict> {
    let params = init_params(4, 5, 12, 2, 3)?;
    let graph = ItemGraph::from_sequences(12, [&[1usize, 2, 3, 4][..], &[5, 6, 2][..], &[7, 8, 9, 10, 11][..]]);
    let base = SequenceBatch::left_padded(&[vec![1, 2, 3, 4, 5]], 5);
    let d0 = encode(&base, &graph, &params, None)?;
    let mut causal = true;
    for t in 0..4 {
        let mut items = base.items().to_vec();
        for slot in items.iter_mut().skip(t + 1) {
            *slot = (*slot + 5) % 11 + 1;
        }
        let d1 = encode(&SequenceBatch::from_padded(5, items)?, &graph, &params, None)?;
        causal &= (0..=t).all(|s| d0.mu.row(s) == d1.mu.row(s) && d0.sigma.row(s) == d1.sigma.row(s));
    }

    let train = tiny_train();
    let mut histories = Vec::new();
    for run in 0..2 {
        let path = scratch.join(format!("history_{run}.jsonl"));
        let _ = fs::remove_file(&path);
        let mut clients = build_clients(generate_synthetic(&tiny_scenario(1))?, &train)?;
        let opts = RunOptions {
            history_path: Some(path.clone()),
            ..RunOptions::default()
        };
        run_federated(&mut clients, &train, &opts)?;
        histories.push(fs::read(&path)?);
    }
    let deterministic = !histories[0].is_empty() && histories[0] == histories[1];
    Ok(Verdict {
        id: 5,
        title: "causality and determinism",
        pass: causal && deterministic,
        detail: format!(
            "earlier positions unchanged by future perturbation: {causal}; identical seeded histories: {deterministic}"
        ),
        directional: false,
    })
}

/// Five seeded runs of `variant` on the default preset at `heterogeneity`.
fn train_variant(root: &Path, variant: Variant, heterogeneity: f64) -> fedcsr_cli::Result<Summary> {
    let mut cfg = ExperimentConfig::synthetic(root.join(format!("h{heterogeneity}")).join(variant.name()));
    if let ScenarioSource::Synthetic(s) = &mut cfg.scenario {
        s.heterogeneity = heterogeneity;
    }
    cfg.variant = Some(variant);
    cfg.train.seed = BASE_SEED;
    cfg.repeats = SEEDS;
    let cfg = cfg.resolved()?;
    eprintln!(
        "training {} at heterogeneity {heterogeneity} ({SEEDS} seeds)",
        variant.name()
    );
    Ok(run_experiment(&cfg)?.summary)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn wins(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x >= y).count()
}

fn fmt_seeds(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

fn criterion_6(runs: &[(Variant, Summary)], elapsed: Duration) -> Verdict {
    let mrr = |v: Variant| {
        runs.iter()
            .find(|(x, _)| *x == v)
            .expect("trained")
            .1
            .seed_mrr(FusionMode::Both)
    };
    let full = mrr(Variant::Feddcsr);
    let no_cim = mrr(Variant::FeddcsrNoCim);
    let neither = mrr(Variant::FeddcsrNoSrdCim);
    let mono = mrr(Variant::FedavgMonolithic);
    let pairs = [
        ("feddcsr >= feddcsr_no_cim", &full, &no_cim),
        ("feddcsr_no_cim >= feddcsr_no_srd_cim", &no_cim, &neither),
        ("feddcsr >= fedavg_monolithic", &full, &mono),
    ];
    let mut pass = elapsed < ORDERING_BUDGET;
    let mut parts = Vec::new();
    for (name, a, b) in pairs {
        let ok = mean(a) >= mean(b) && wins(a, b) >= MIN_SEED_WINS;
        pass &= ok;
        parts.push(format!(
            "{name}: {} ({:.4} vs {:.4}, {}/{SEEDS} seeds)",
            if ok { "holds" } else { "violated" },
            mean(a),
            mean(b),
            wins(a, b)
        ));
    }
    parts.push(format!("{:.1} min", elapsed.as_secs_f64() / 60.0));
    Verdict {
        id: 6,
        title: "variant ordering at heterogeneity 0.6",
        pass,
        detail: parts.join("; "),
        directional: true,
    }
}

fn criterion_7(full: &Summary) -> Verdict {
    let both = full.seed_mrr(FusionMode::Both);
    let shared = full.seed_mrr(FusionMode::Shared);
    let exclusive = full.seed_mrr(FusionMode::Exclusive);
    let seeds = both
        .iter()
        .zip(shared.iter().zip(&exclusive))
        .filter(|(b, (s, e))| b >= s && b >= e)
        .count();
    Verdict {
        id: 7,
        title: "fused representation beats each branch",
        pass: seeds >= MIN_SEED_WINS,
        detail: format!(
            "both >= shared and exclusive in {seeds}/{SEEDS} seeds (both {}; shared {}; exclusive {})",
            fmt_seeds(&both),
            fmt_seeds(&shared),
            fmt_seeds(&exclusive)
        ),
        directional: true,
    }
}

fn criterion_8(full: &Summary, mono: &Summary) -> Verdict {
    let a = mean(&full.seed_mrr(FusionMode::Both));
    let b = mean(&mono.seed_mrr(FusionMode::Both));
    let gap = (b - a).abs() / a.max(b);
    Verdict {
        id: 8,
        title: "homogeneous degeneracy",
        pass: gap <= DEGENERACY_TOL,
        detail: format!(
            "feddcsr {a:.4}, fedavg_monolithic {b:.4}, relative gap {:.1}% (limit 10%)",
            100.0 * gap
        ),
        directional: true,
    }
}

fn failed(id: usize, title: &'static str, directional: bool, err: impl std::fmt::Display) -> Verdict {
    Verdict {
        id,
        title,
        pass: false,
        detail: format!("error: {err}"),
        directional,
    }
}

fn directional(root: &Path) -> Vec<Verdict> {
    let start = Instant::now();
    let ordering = [
        Variant::Feddcsr,
        Variant::FeddcsrNoCim,
        Variant::FeddcsrNoSrdCim,
        Variant::FedavgMonolithic,
    ]
    .into_iter()
    .map(|v| train_variant(root, v, HETEROGENEOUS).map(|s| (v, s)))
    .collect::<fedcsr_cli::Result<Vec<_>>>();
    let elapsed = start.elapsed();
    let homogeneous = train_variant(root, Variant::Feddcsr, 0.0)
        .and_then(|a| train_variant(root, Variant::FedavgMonolithic, 0.0).map(|b| (a, b)));

    let mut out = Vec::new();
    match &ordering {
        Ok(runs) => {
            out.push(criterion_6(runs, elapsed));
            out.push(criterion_7(&runs[0].1));
        }
        Err(e) => {
            out.push(failed(6, "variant ordering at heterogeneity 0.6", true, e));
            out.push(failed(7, "fused representation beats each branch", true, e));
        }
    }
    out.push(match &homogeneous {
        Ok((a, b)) => criterion_8(a, b),
        Err(e) => failed(8, "homogeneous degeneracy", true, e),
    });
    out
}

fn main() -> ExitCode {
    // libtest flags (e.g. `--quiet` or a name filter) are accepted and ignored
    let strict = std::env::var(STRICT_ENV).is_ok_and(|v| v == "1");
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if let Err(e) = fs::create_dir_all(&root) {
        eprintln!("cannot create {}: {e}", root.display());
        return ExitCode::FAILURE;
    }

    let mut verdicts = vec![criterion_1(), criterion_2(), criterion_3()];
    verdicts.push(criterion_4().unwrap_or_else(|e| failed(4, "protocol invariants", false, e)));
    verdicts.push(criterion_5(&root).unwrap_or_else(|e| failed(5, "causality and determinism", false, e)));
    for v in &verdicts {
        println!("{}", v.line());
    }
    let directional = directional(&root);
    for v in &directional {
        println!("{}", v.line());
    }
    verdicts.extend(directional);

    let mut md = String::from("# Acceptance\n\n");
    for v in &verdicts {
        let _ = writeln!(md, "- {}", v.line());
    }
    let _ = fs::write(root.join("acceptance.md"), md);

    let hard = verdicts.iter().filter(|v| !v.pass && !v.directional).count();
    let soft = verdicts.iter().filter(|v| !v.pass && v.directional).count();
    println!(
        "acceptance: {} of {} criteria pass ({hard} exact failures, {soft} directional failures{})",
        verdicts.iter().filter(|v| v.pass).count(),
        verdicts.len(),
        if strict { ", strict" } else { "" }
    );
    if hard > 0 || (strict && soft > 0) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
