//! Amazon-style interaction dumps.
//!
//! Each domain lives in `<dir>/<domain>.csv` (`user_id,item_id,rating,timestamp`,
//! optional header) or `<dir>/<domain>.jsonl` (one object per line with the same
//! keys; the original dump's `reviewerID`/`asin`/`overall`/`unixReviewTime`
//! are accepted as aliases).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{DomainDataset, UserId, UserSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct IngestedDomain {
    pub dataset: DomainDataset,
    /// Rows that could not be parsed and were skipped.
    pub skipped_rows: usize,
}

#[derive(Deserialize)]
struct JsonRow {
    #[serde(alias = "reviewerID")]
    user_id: serde_json::Value,
    #[serde(alias = "asin")]
    item_id: serde_json::Value,
    #[serde(default, alias = "overall")]
    #[allow(dead_code)]
    rating: Option<f64>,
    #[serde(alias = "unixReviewTime")]
    timestamp: i64,
}

struct Interaction {
    user: String,
    item: String,
    timestamp: i64,
}

fn key(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) if !s.is_empty() => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_csv_line(line: &str) -> Option<Interaction> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 4 || fields[0].is_empty() || fields[1].is_empty() {
        return None;
    }
    fields[2].parse::<f64>().ok()?;
    let timestamp = fields[3].parse::<i64>().ok()?;
    Some(Interaction {
        user: fields[0].to_owned(),
        item: fields[1].to_owned(),
        timestamp,
    })
}

fn parse_json_line(line: &str) -> Option<Interaction> {
    let row: JsonRow = serde_json::from_str(line).ok()?;
    Some(Interaction {
        user: key(&row.user_id)?,
        item: key(&row.item_id)?,
        timestamp: row.timestamp,
    })
}

fn locate(dir: &Path, domain: &str) -> Result<(PathBuf, bool)> {
    for (ext, json) in [("csv", false), ("jsonl", true), ("json", true)] {
        let p = dir.join(format!("{domain}.{ext}"));
        if p.is_file() {
            return Ok((p, json));
        }
    }
    Err(Error::Config(format!(
        "no interaction file for domain `{domain}` in {} (expected {domain}.csv or {domain}.jsonl)",
        dir.display()
    )))
}

fn ingest_file(path: &Path, json: bool, domain: &str) -> Result<IngestedDomain> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut skipped = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if !json && lineno == 0 && line.starts_with("user_id") {
            continue;
        }
        let parsed = if json {
            parse_json_line(line)
        } else {
            parse_csv_line(line)
        };
        match parsed {
            Some(r) => rows.push(r),
            None => {
                skipped += 1;
                log::warn!("{}:{}: skipping malformed row", path.display(), lineno + 1);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Data {
            path: path.to_owned(),
            message: "no interactions".into(),
        });
    }

    let mut item_keys: Vec<String> = rows.iter().map(|r| r.item.clone()).collect();
    item_keys.sort();
    item_keys.dedup();
    let index: BTreeMap<&str, usize> = item_keys.iter().enumerate().map(|(i, k)| (k.as_str(), i + 1)).collect();

    let mut per_user: BTreeMap<String, Vec<(i64, usize)>> = BTreeMap::new();
    for r in &rows {
        per_user
            .entry(r.user.clone())
            .or_default()
            .push((r.timestamp, index[r.item.as_str()]));
    }
    let sequences = per_user
        .into_iter()
        .map(|(user, mut events)| {
            // stable: equal timestamps keep file order
            events.sort_by_key(|&(t, _)| t);
            UserSequence {
                user_id: UserId(user),
                items: events.iter().map(|&(_, i)| i).collect(),
                timestamps: Some(events.iter().map(|&(t, _)| t).collect()),
            }
        })
        .collect();

    let mut dataset = DomainDataset::raw(domain, item_keys.len() + 1, sequences);
    dataset.item_keys = std::iter::once("<pad>".to_owned()).chain(item_keys).collect();
    Ok(IngestedDomain {
        dataset,
        skipped_rows: skipped,
    })
}

/// Reads one raw (unfiltered) dataset per domain name.
pub fn ingest_amazon(dir: &Path, domain_names: &[String]) -> Result<Vec<IngestedDomain>> {
    domain_names
        .iter()
        .map(|name| {
            let (path, json) = locate(dir, name)?;
            ingest_file(&path, json, name)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn csv_with_one_malformed_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::from("user_id,item_id,rating,timestamp\n");
        for i in 0..10 {
            if i == 4 {
                body.push_str("u1,broken-row\n");
            } else {
                body.push_str(&format!("u{},{},5.0,{}\n", i % 2, 100 + i, 1000 - i));
            }
        }
        write(dir.path(), "food.csv", &body);
        let out = ingest_amazon(dir.path(), &["food".into()]).unwrap();
        let d = &out[0];
        assert_eq!(d.skipped_rows, 1);
        let total: usize = d.dataset.train.values().map(|s| s.len()).sum();
        assert_eq!(total, 9);
        // newest timestamp last
        let u0 = &d.dataset.train[&"u0".into()];
        let ts = u0.timestamps.as_ref().unwrap();
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "food.csv", "");
        let err = ingest_amazon(dir.path(), &["food".into()]).unwrap_err();
        assert!(err.to_string().contains("no interactions"), "{err}");
    }

    #[test]
    fn missing_file_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest_amazon(dir.path(), &["book".into()]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn json_lines_with_dump_aliases() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "game.jsonl",
            "{\"reviewerID\":\"A1\",\"asin\":\"B9\",\"overall\":4.0,\"unixReviewTime\":7}\n\
             {\"user_id\":\"A1\",\"item_id\":\"B2\",\"rating\":1,\"timestamp\":3}\n\
             not json\n",
        );
        let out = ingest_amazon(dir.path(), &["game".into()]).unwrap();
        let ds = &out[0].dataset;
        assert_eq!(out[0].skipped_rows, 1);
        assert_eq!(ds.item_keys, vec!["<pad>", "B2", "B9"]);
        assert_eq!(ds.train[&"A1".into()].items, vec![1, 2]);
    }
}
