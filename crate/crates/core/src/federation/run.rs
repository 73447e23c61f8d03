use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::client::{initial_predictor, initial_shared, ClientState};
use super::config::TrainConfig;
use super::protocol::{aggregate_params, aggregate_representations, GlobalState, UpMessage};
use crate::datasets::UserId;
use crate::error::{Error, Result};
use crate::evaluation::{EvalResult, FusionMode, Metrics, Split};
use crate::params::ParamSet;
use crate::srd::LossBreakdown;

/// Checkpoint archive format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub round: usize,
    pub client: usize,
    pub domain: String,
    /// Mean term values over the batches of the round's last local epoch.
    pub losses: LossBreakdown,
    pub total_loss: f64,
    pub valid: BTreeMap<FusionMode, Metrics>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Per-round checkpoints are written here when set.
    pub checkpoint_dir: Option<PathBuf>,
    /// History is appended here (JSON lines) when set.
    pub history_path: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub global: GlobalState,
    pub history: Vec<HistoryRecord>,
    pub rounds_run: usize,
    /// Round (0-based) with the best average validation MRR.
    pub best_round: usize,
    /// Average validation MRR (`both` fusion) after each round.
    pub valid_curve: Vec<f64>,
    pub valid_at_best: BTreeMap<FusionMode, EvalResult>,
    pub test_at_best: BTreeMap<FusionMode, EvalResult>,
    /// Messages exchanged between server and clients.
    pub messages: usize,
}

/// Per-mode results across clients.
fn collect(per_client: &[(String, BTreeMap<FusionMode, Metrics>)], k: usize) -> BTreeMap<FusionMode, EvalResult> {
    let mut modes: BTreeMap<FusionMode, BTreeMap<String, Metrics>> = BTreeMap::new();
    for (domain, res) in per_client {
        for (&m, &v) in res {
            modes.entry(m).or_default().insert(domain.clone(), v);
        }
    }
    modes.into_iter().map(|(m, d)| (m, EvalResult::new(d, m, k))).collect()
}

fn evaluate_all(
    clients: &[ClientState],
    split: Split,
    cfg: &TrainConfig,
) -> Result<Vec<(String, BTreeMap<FusionMode, Metrics>)>> {
    clients
        .iter()
        .map(|c| Ok((c.domain.domain_name.clone(), c.evaluate(split, cfg)?)))
        .collect()
}

fn shared_vocab(clients: &[ClientState]) -> usize {
    clients.iter().map(|c| c.shared.shape.vocab_size).max().unwrap_or(0)
}

/// Initial server state: shared parameters every client starts from and an
/// empty representation table.
pub fn initial_global(clients: &[ClientState], cfg: &TrainConfig) -> Result<GlobalState> {
    let mut shared_params = initial_shared(cfg, shared_vocab(clients))?.to_param_set("shared.");
    if cfg.variant.is_monolithic() {
        shared_params.extend(initial_predictor(cfg).to_param_set("predictor."))?;
    }
    Ok(GlobalState {
        shared_params,
        rep_table: BTreeMap::new(),
        round: 0,
    })
}

/// Server loop: broadcast, local updates, aggregation, validation and early
/// stopping on the average validation MRR of the fused representation.
pub fn run_federated(clients: &mut [ClientState], cfg: &TrainConfig, opts: &RunOptions) -> Result<RunOutcome> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::Config("at least one client is required".into()));
    }
    if clients.iter().any(|c| c.is_monolithic() != cfg.variant.is_monolithic()) {
        return Err(Error::Config("clients were built for a different variant".into()));
    }
    let federated = cfg.variant.is_federated();
    let mut global = initial_global(clients, cfg)?;
    let mut history = Vec::new();
    let mut valid_curve = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut best_round = 0;
    let mut since_best = 0;
    let mut valid_at_best = BTreeMap::new();
    let mut test_at_best = BTreeMap::new();
    let mut messages = 0;
    let mut rounds_run = 0;
    if let Some(p) = &opts.history_path {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::File::create(p)?;
    }

    for round in 0..cfg.rounds {
        let mut losses = Vec::with_capacity(clients.len());
        if federated {
            let down = global.broadcast();
            messages += clients.len();
            let mut ups: Vec<UpMessage> = Vec::with_capacity(clients.len());
            for c in clients.iter_mut() {
                c.receive(&down)?;
                losses.push(c.train_round(round, cfg)?);
                ups.push(c.upload()?);
            }
            messages += ups.len();
            global.shared_params = aggregate_params(&ups)?;
            global.rep_table = aggregate_representations(&ups)?;
        } else {
            for c in clients.iter_mut() {
                losses.push(c.train_round(round, cfg)?);
            }
        }
        global.round = round + 1;
        rounds_run = round + 1;

        let valid = evaluate_all(clients, Split::Valid, cfg)?;
        let weights = cfg.weights();
        let records: Vec<HistoryRecord> = clients
            .iter()
            .zip(&losses)
            .zip(&valid)
            .map(|((c, l), (domain, v))| HistoryRecord {
                round,
                client: c.id,
                domain: domain.clone(),
                losses: *l,
                total_loss: l.total(&weights),
                valid: v.clone(),
            })
            .collect();
        if let Some(p) = &opts.history_path {
            let mut f = fs::OpenOptions::new().append(true).open(p)?;
            for r in &records {
                writeln!(f, "{}", serde_json::to_string(r)?)?;
            }
        }
        history.extend(records);
        if let Some(dir) = &opts.checkpoint_dir {
            save_checkpoint(&dir.join(format!("round_{round:03}.ckpt")), &global, clients)?;
        }

        let results = collect(&valid, cfg.eval_k);
        let score = results[&FusionMode::Both].average.mrr;
        valid_curve.push(score);
        log::info!("round {round}: average validation MRR {score:.4}");
        if score > best {
            best = score;
            best_round = round;
            since_best = 0;
            valid_at_best = results;
            test_at_best = collect(&evaluate_all(clients, Split::Test, cfg)?, cfg.eval_k);
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("early stop after round {round}");
                break;
            }
        }
    }

    Ok(RunOutcome {
        global,
        history,
        rounds_run,
        best_round,
        valid_curve,
        valid_at_best,
        test_at_best,
        messages,
    })
}

/// Local training of one client without any protocol: `rounds × local_epochs`
/// epochs with the same random streams the federated loop uses. Returns the
/// per-round loss breakdowns.
pub fn train_standalone(client: &mut ClientState, cfg: &TrainConfig) -> Result<Vec<LossBreakdown>> {
    cfg.validate()?;
    (0..cfg.rounds).map(|r| client.train_round(r, cfg)).collect()
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    round: usize,
    clients: Vec<ClientMeta>,
}

#[derive(Serialize, Deserialize)]
struct ClientMeta {
    id: usize,
    domain: String,
    adam_step: u64,
}

/// Writes the server state and every client's parameters and optimiser
/// moments to one tensor archive.
pub fn save_checkpoint(path: &Path, global: &GlobalState, clients: &[ClientState]) -> Result<()> {
    let mut set = ParamSet::new();
    for (name, t) in global.shared_params.iter() {
        set.insert(format!("global.{name}"), t.clone());
    }
    for (user, t) in &global.rep_table {
        set.insert(format!("global.rep.{user}"), t.clone());
    }
    for c in clients {
        for (name, t) in c.to_param_set().iter() {
            set.insert(format!("client{}.{name}", c.id), t.clone());
        }
    }
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        round: global.round,
        clients: clients
            .iter()
            .map(|c| ClientMeta {
                id: c.id,
                domain: c.domain.domain_name.clone(),
                adam_step: c.optimizer.steps(),
            })
            .collect(),
    };
    set.save(path, serde_json::to_value(meta)?)
}

/// Loads a checkpoint into freshly built `clients` (same data and variant)
/// and returns the server state.
pub fn restore_checkpoint(path: &Path, clients: &mut [ClientState]) -> Result<GlobalState> {
    let (set, meta) = ParamSet::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta)?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            meta.version
        )));
    }
    let mut shared_params = ParamSet::new();
    let mut rep_table = BTreeMap::new();
    for (name, t) in set.iter() {
        if let Some(user) = name.strip_prefix("global.rep.") {
            rep_table.insert(UserId(user.to_owned()), t.clone());
        } else if let Some(rest) = name.strip_prefix("global.") {
            shared_params.insert(rest, t.clone());
        }
    }
    for c in clients.iter_mut() {
        let m = meta
            .clients
            .iter()
            .find(|m| m.id == c.id)
            .ok_or_else(|| Error::Checkpoint(format!("client {} absent from checkpoint", c.id)))?;
        if m.domain != c.domain.domain_name {
            return Err(Error::Checkpoint(format!(
                "client {} holds domain `{}`, checkpoint has `{}`",
                c.id, c.domain.domain_name, m.domain
            )));
        }
        let prefix = format!("client{}.", c.id);
        let own = ParamSet::from_named(
            set.iter()
                .filter_map(|(n, t)| n.strip_prefix(&prefix).map(|rest| (rest.to_owned(), t.clone()))),
        );
        c.restore(&own, m.adam_step)?;
    }
    Ok(GlobalState {
        shared_params,
        rep_table,
        round: meta.round,
    })
}
