//! Metrics and training-history files.

use kbgsat_core::eval::Metrics;
use kbgsat_core::selftrain::RoundReport;
use kbgsat_core::train::FitOutcome;
use serde::ser::{SerializeMap, Serializer};
use serde::Serialize;

/// `{1: h1, 3: h3, 10: h10}` with keys in cutoff order.
struct Hits<'a>(&'a [(usize, f64)]);

impl Serialize for Hits<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in self.0 {
            map.serialize_entry(&k.to_string(), v)?;
        }
        map.end()
    }
}

#[derive(Serialize)]
struct MetricsJson<'a> {
    mr: f64,
    mrr: f64,
    hits: Hits<'a>,
    n_queries: usize,
    filter_policy: &'static str,
}

/// Machine-readable metrics object.
pub fn metrics_json(m: &Metrics) -> String {
    let j = MetricsJson {
        mr: m.mr,
        mrr: m.mrr,
        hits: Hits(&m.hits),
        n_queries: m.n_queries,
        filter_policy: m.filter_policy.name(),
    };
    let mut s = serde_json::to_string_pretty(&j).expect("metrics serialise");
    s.push('\n');
    s
}

/// Human-readable metrics block.
pub fn metrics_text(split: &str, m: &Metrics) -> String {
    let mut s = format!(
        "{split} split, filter={}, {} queries\n  MR    {:.4}\n  MRR   {:.4}\n",
        m.filter_policy.name(),
        m.n_queries,
        m.mr,
        m.mrr
    );
    for (k, h) in &m.hits {
        s.push_str(&format!("  H@{k:<3} {h:.4}\n"));
    }
    s
}

#[derive(Serialize)]
struct EpochJson {
    epoch: usize,
    loss: f64,
    valid_mrr: f64,
}

#[derive(Serialize)]
struct HistoryJson {
    best_epoch: usize,
    best_valid_mrr: f64,
    stopped_early: bool,
    epochs: Vec<EpochJson>,
}

fn history(fit: &FitOutcome) -> HistoryJson {
    HistoryJson {
        best_epoch: fit.best.epoch,
        best_valid_mrr: fit.best.valid_mrr,
        stopped_early: fit.stopped_early,
        epochs: fit
            .history
            .iter()
            .map(|e| EpochJson {
                epoch: e.epoch,
                loss: e.loss,
                valid_mrr: e.valid_mrr,
            })
            .collect(),
    }
}

fn pretty(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("history serialises");
    s.push('\n');
    s
}

/// Per-epoch loss and validation MRR of one fit.
pub fn history_json(fit: &FitOutcome) -> String {
    pretty(&history(fit))
}

#[derive(Serialize)]
struct RoundJson {
    round: usize,
    generated: usize,
    skipped_pairs: usize,
    added: usize,
    train_size: usize,
    history: HistoryJson,
}

/// Self-training rounds, each with its retraining history.
pub fn selftrain_history_json(rounds: &[RoundReport]) -> String {
    let rounds: Vec<RoundJson> = rounds
        .iter()
        .enumerate()
        .map(|(i, r)| RoundJson {
            round: i + 1,
            generated: r.generation.triples.len(),
            skipped_pairs: r.generation.skipped.len(),
            added: r.added.len(),
            train_size: r.train_size,
            history: history(&r.fit),
        })
        .collect();
    pretty(&serde_json::json!({ "rounds": rounds }))
}
