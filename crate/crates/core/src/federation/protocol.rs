use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datasets::UserId;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Client → server: trained shared parameters, per-user shared
/// representations and the local training-set size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpMessage {
    pub client_id: usize,
    pub shared_params: ParamSet,
    pub rep_table: BTreeMap<UserId, Tensor>,
    pub sample_count: usize,
}

/// Server → client: global shared parameters and representation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownMessage {
    pub round: usize,
    pub shared_params: ParamSet,
    pub rep_table: BTreeMap<UserId, Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "direction", rename_all = "lowercase")]
pub enum RoundMessage {
    Up(UpMessage),
    Down(DownMessage),
}

/// Server-side state between rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub shared_params: ParamSet,
    pub rep_table: BTreeMap<UserId, Tensor>,
    /// Completed rounds.
    pub round: usize,
}

impl GlobalState {
    pub fn broadcast(&self) -> DownMessage {
        DownMessage {
            round: self.round,
            shared_params: self.shared_params.clone(),
            rep_table: self.rep_table.clone(),
        }
    }
}

/// `Σ wᵢ xᵢ` evaluated as `x₀ + Σ wᵢ (xᵢ − x₀)`, so identical inputs come
/// back bit-for-bit.
fn weighted_mean(items: &[(f64, &Tensor)]) -> Tensor {
    let base = items[0].1;
    let mut out = base.clone();
    for &(w, x) in &items[1..] {
        for ((o, xi), bi) in out.data_mut().iter_mut().zip(x.data()).zip(base.data()) {
            *o += w * (xi - bi);
        }
    }
    out
}

fn sorted(ups: &[UpMessage]) -> Result<Vec<&UpMessage>> {
    if ups.is_empty() {
        return Err(Error::Protocol("no client messages to aggregate".into()));
    }
    let mut v: Vec<&UpMessage> = ups.iter().collect();
    v.sort_by_key(|u| u.client_id);
    if v.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Protocol("duplicate client id in round".into()));
    }
    Ok(v)
}

/// Aggregation weights `|D_k| / Σ |D_j|` in client-id order.
pub fn aggregation_weights(ups: &[UpMessage]) -> Result<Vec<(usize, f64)>> {
    let ups = sorted(ups)?;
    let total: usize = ups.iter().map(|u| u.sample_count).sum();
    if total == 0 {
        return Err(Error::Protocol("all clients report zero samples".into()));
    }
    Ok(ups
        .iter()
        .map(|u| (u.client_id, u.sample_count as f64 / total as f64))
        .collect())
}

/// Sample-size weighted average of the uploaded parameters. The result does
/// not depend on message order.
pub fn aggregate_params(ups: &[UpMessage]) -> Result<ParamSet> {
    let weights = aggregation_weights(ups)?;
    let ups = sorted(ups)?;
    let first = &ups[0].shared_params;
    if let Some(bad) = ups.iter().find(|u| !u.shared_params.same_layout(first)) {
        return Err(Error::Protocol(format!(
            "client {} uploaded parameters with a different layout",
            bad.client_id
        )));
    }
    Ok(ParamSet::from_named(first.names().map(|name| {
        let items: Vec<(f64, &Tensor)> = ups
            .iter()
            .zip(&weights)
            .map(|(u, &(_, w))| (w, u.shared_params.get(name).expect("layout checked")))
            .collect();
        (name.clone(), weighted_mean(&items))
    })))
}

/// Per-user weighted average over the clients that reported the user,
/// weights renormalised over those clients.
pub fn aggregate_representations(ups: &[UpMessage]) -> Result<BTreeMap<UserId, Tensor>> {
    let ups = sorted(ups)?;
    let mut by_user: BTreeMap<&UserId, Vec<(usize, &Tensor)>> = BTreeMap::new();
    for u in &ups {
        for (user, rep) in &u.rep_table {
            if !rep.is_finite() {
                return Err(Error::Protocol(format!(
                    "client {} sent a non-finite representation for {user}",
                    u.client_id
                )));
            }
            by_user.entry(user).or_default().push((u.sample_count, rep));
        }
    }
    by_user
        .into_iter()
        .map(|(user, reps)| {
            let shape = reps[0].1.shape();
            if reps.iter().any(|(_, r)| r.shape() != shape) {
                return Err(Error::Protocol(format!("representations of {user} disagree in shape")));
            }
            let total: usize = reps.iter().map(|(c, _)| c).sum();
            let items: Vec<(f64, &Tensor)> = if total == 0 {
                reps.iter().map(|&(_, r)| (1.0 / reps.len() as f64, r)).collect()
            } else {
                reps.iter().map(|&(c, r)| (c as f64 / total as f64, r)).collect()
            };
            Ok((user.clone(), weighted_mean(&items)))
        })
        .collect()
}

/// Keys that would indicate raw interaction data in a message.
const FORBIDDEN_KEYS: [&str; 8] = [
    "items",
    "item_ids",
    "sequence",
    "sequences",
    "timestamps",
    "train",
    "valid",
    "test",
];

/// Structural check that a serialised message carries no item indices or
/// sequences: no forbidden keys and no integer arrays beyond `[rows, cols]`
/// pairs. Returns the JSON paths of violations.
pub fn privacy_violations(message: &RoundMessage) -> Result<Vec<String>> {
    let value = serde_json::to_value(message)?;
    let mut out = Vec::new();
    walk(&value, "$", &mut out);
    Ok(out)
}

fn walk(v: &serde_json::Value, path: &str, out: &mut Vec<String>) {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                if FORBIDDEN_KEYS.contains(&k.as_str()) {
                    out.push(format!("{path}.{k}"));
                }
                walk(child, &format!("{path}.{k}"), out);
            }
        }
        Value::Array(items) => {
            let integers = items.iter().filter(|x| x.is_u64() || x.is_i64()).count();
            if integers > 2 {
                out.push(format!("{path}[{integers} integers]"));
            }
            for (i, child) in items.iter().enumerate() {
                walk(child, &format!("{path}[{i}]"), out);
            }
        }
        _ => {}
    }
}
