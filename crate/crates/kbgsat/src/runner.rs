//! The work behind each subcommand. Every command echoes the resolved
//! configuration first, loads and validates all inputs, and only then creates
//! output files.

use std::io::Write;
use std::path::PathBuf;

use kbgsat_core::data::{augment, known_tails, Split, SplitSet, Triple, TripleStore};
use kbgsat_core::eval::{Evaluator, Metrics, DEFAULT_KS};
use kbgsat_core::model::{Embeddings, Model, Scorer};
use kbgsat_core::selftrain::descending_order;
use kbgsat_core::train::fit;

use crate::checkpoint::{quantize, Checkpoint};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::{export_dicts, load_dataset, load_report_json, load_report_summary, write_file};
use crate::parallel::evaluate_parallel;
use crate::report::{history_json, metrics_json, metrics_text, selftrain_history_json};

/// Console sink; write failures (e.g. a closed pipe) are not run failures.
macro_rules! say {
    ($out:expr, $($arg:tt)*) => {{
        let _ = writeln!($out, $($arg)*);
    }};
}

fn echo(cfg: &RunConfig, command: &str, out: &mut dyn Write) {
    say!(out, "# kbgsat {command}: resolved configuration");
    let _ = write!(out, "{}", cfg.echo());
    say!(out, "# config hash {}", cfg.hash());
}

fn evaluator(store: &TripleStore, cfg: &RunConfig) -> Evaluator {
    let mut e = Evaluator::new(store, cfg.filter);
    e.batch_size = cfg.eval_batch_size;
    e
}

/// Names of the files a command writes, relative to the output directory.
pub mod files {
    pub const HISTORY: &str = "history.json";
    pub const LOAD_REPORT: &str = "load_report.json";
    pub const RESOLVED: &str = "resolved.conf";
    pub const GENERATED: &str = "generated.tsv";
    pub const SELFTRAIN_CKPT: &str = "selftrain.ckpt";
    pub const SELFTRAIN_HISTORY: &str = "selftrain_history.json";

    pub fn metrics(split: &str) -> [String; 2] {
        [format!("metrics_{split}.json"), format!("metrics_{split}.txt")]
    }
}

fn write_metrics(cfg: &RunConfig, split: Split, m: &Metrics, out: &mut dyn Write) -> Result<()> {
    let [json, txt] = files::metrics(split.name());
    let text = metrics_text(split.name(), m);
    write_file(&cfg.output.join(json), metrics_json(m).as_bytes())?;
    write_file(&cfg.output.join(txt), text.as_bytes())?;
    let _ = write!(out, "{text}");
    Ok(())
}

fn evaluate_model(
    cfg: &RunConfig,
    model: &Model,
    graph_store: &TripleStore,
    eval_store: &TripleStore,
    split: Split,
) -> Result<Metrics> {
    let emb = model.embed(&augment(graph_store))?;
    let triples = eval_store.split(split);
    if triples.is_empty() {
        return Err(CliError::Data(format!("the {} split is empty", split.name())));
    }
    Ok(evaluate_parallel(&evaluator(eval_store, cfg), &emb, triples, &DEFAULT_KS, cfg.workers)?)
}

/// Pretrains a model and writes its checkpoint, history and metrics.
pub fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    echo(cfg, "train", out);
    let (store, report) = load_dataset(&cfg.dataset)?;
    say!(out, "{}", load_report_summary(&report));
    let mut model = Model::new(cfg.model_config(store.num_entities(), store.num_relations())?, cfg.seed)?;
    say!(out, "model: {} parameters", model.params.num_scalars());
    let ev = evaluator(&store, cfg);
    let fit_out = fit(&mut model, &store, &cfg.train_config(), |m, g, epoch| {
        let mrr = evaluate_parallel(&ev, &m.embed(g)?, &store.valid, &DEFAULT_KS, cfg.workers)?.mrr;
        say!(out, "epoch {epoch}: valid MRR {mrr:.6}");
        Ok(mrr)
    })?;
    say!(
        out,
        "best epoch {} (valid MRR {:.6}){}",
        fit_out.best.epoch,
        fit_out.best.valid_mrr,
        if fit_out.stopped_early { ", stopped early" } else { "" }
    );
    quantize(&mut model);
    let metrics = if store.split(cfg.eval_split).is_empty() {
        None
    } else {
        Some(evaluate_model(cfg, &model, &store, &store, cfg.eval_split)?)
    };
    let ck = Checkpoint {
        model,
        config_hash: cfg.hash(),
        epoch: fit_out.best.epoch,
        best_valid_mrr: fit_out.best.valid_mrr,
        extra_train: Vec::new(),
    };
    ck.save(&cfg.checkpoint)?;
    write_file(&cfg.output.join(files::HISTORY), history_json(&fit_out).as_bytes())?;
    write_file(&cfg.output.join(files::LOAD_REPORT), load_report_json(&report).as_bytes())?;
    write_file(&cfg.output.join(files::RESOLVED), cfg.echo().as_bytes())?;
    if let Some(m) = metrics {
        write_metrics(cfg, cfg.eval_split, &m, out)?;
    }
    say!(out, "wrote {}", cfg.checkpoint.display());
    Ok(())
}

/// Dataset plus a checkpoint trained on it.
struct Loaded {
    store: TripleStore,
    ck: Checkpoint,
}

impl Loaded {
    fn open(cfg: &RunConfig, out: &mut dyn Write) -> Result<Loaded> {
        let (store, report) = load_dataset(&cfg.dataset)?;
        say!(out, "{}", load_report_summary(&report));
        let ck = Checkpoint::load(&cfg.checkpoint)?;
        ck.check_counts(store.num_entities(), store.num_relations())?;
        say!(
            out,
            "checkpoint {}: epoch {}, valid MRR {:.6}, {} extra training triples",
            cfg.checkpoint.display(),
            ck.epoch,
            ck.best_valid_mrr,
            ck.extra_train.len()
        );
        if ck.config_hash != cfg.hash() {
            say!(
                out,
                "note: checkpoint was trained with a different configuration; its architecture is used"
            );
        }
        Ok(Loaded { store, ck })
    }

    /// The store whose training split (including self-training additions)
    /// defines the encoder's graph.
    fn graph_store(&self) -> TripleStore {
        self.store.with_extra_train(&self.ck.extra_train)
    }
}

/// Generates triples from a checkpoint, retrains on the extended train split
/// and writes the generated file, the new checkpoint and the history.
pub fn selftrain(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    echo(cfg, "selftrain", out);
    let loaded = Loaded::open(cfg, out)?;
    let store = &loaded.store;
    let start = loaded.graph_store();
    let st_cfg = cfg.selftrain_config();
    if !st_cfg.generate {
        say!(out, "generation disabled: resuming training for up to {} epochs", st_cfg.retrain_epochs);
    }
    // Early stopping and the final metrics are filtered with the original splits.
    let ev = evaluator(store, cfg);
    let result = kbgsat_core::selftrain::self_train(
        loaded.ck.model.clone(),
        &start,
        &cfg.train_config(),
        &st_cfg,
        |m, g, round, epoch| {
            let mrr = evaluate_parallel(&ev, &m.embed(g)?, &store.valid, &DEFAULT_KS, cfg.workers)?.mrr;
            say!(out, "round {round} epoch {epoch}: valid MRR {mrr:.6}");
            Ok(mrr)
        },
    )?;
    for (i, r) in result.rounds.iter().enumerate() {
        say!(
            out,
            "round {}: generated {} triples ({} pairs without a candidate), {} new, train size {}",
            i + 1,
            r.generation.triples.len(),
            r.generation.skipped.len(),
            r.added.len(),
            r.train_size
        );
    }
    let last = result.rounds.last().expect("at least one round");
    let extra: Vec<Triple> = result.train_store.train[store.train.len()..].to_vec();
    let generated: Vec<Triple> = result.train_store.train[start.train.len()..].to_vec();
    let mut model = result.model;
    quantize(&mut model);
    let metrics = if store.split(cfg.eval_split).is_empty() {
        None
    } else {
        Some(evaluate_model(cfg, &model, &result.train_store, store, cfg.eval_split)?)
    };
    let ck = Checkpoint {
        model,
        config_hash: cfg.hash(),
        epoch: last.fit.best.epoch,
        best_valid_mrr: last.fit.best.valid_mrr,
        extra_train: extra,
    };
    let ck_path = cfg.output.join(files::SELFTRAIN_CKPT);
    write_file(&cfg.output.join(files::GENERATED), store.triples_to_tsv(&generated).as_bytes())?;
    ck.save(&ck_path)?;
    write_file(
        &cfg.output.join(files::SELFTRAIN_HISTORY),
        selftrain_history_json(&result.rounds).as_bytes(),
    )?;
    write_file(&cfg.output.join(files::RESOLVED), cfg.echo().as_bytes())?;
    if let Some(m) = metrics {
        write_metrics(cfg, cfg.eval_split, &m, out)?;
    }
    say!(out, "wrote {} and {}", cfg.output.join(files::GENERATED).display(), ck_path.display());
    Ok(())
}

/// Parses a split name given on the command line.
pub fn parse_split(name: &str) -> Result<Split> {
    Split::parse(name).ok_or_else(|| CliError::Usage(format!("unknown split `{name}` (expected train, valid or test)")))
}

/// Scores a checkpoint on one split and writes the metrics object.
pub fn eval(cfg: &RunConfig, split: Split, out: &mut dyn Write) -> Result<Metrics> {
    echo(cfg, "eval", out);
    let loaded = Loaded::open(cfg, out)?;
    let m = evaluate_model(cfg, &loaded.ck.model, &loaded.graph_store(), &loaded.store, split)?;
    write_metrics(cfg, split, &m, out)?;
    Ok(m)
}

/// Which side of the triple is missing in a prediction query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// `(entity, relation, ?)`
    Tail,
    /// `(?, relation, entity)`
    Head,
}

#[derive(Clone, Debug)]
pub struct PredictRequest {
    pub entity: String,
    pub relation: String,
    pub direction: Direction,
    pub k: usize,
    /// Keep candidates already known from the training split.
    pub include_known: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub entity: String,
    pub probability: f64,
    pub score: f64,
}

fn resolve(dict: &kbgsat_core::data::Dictionary, kind: &str, name: &str) -> Result<usize> {
    dict.id(name).ok_or_else(|| {
        let near = dict.nearest(name, 5);
        CliError::Usage(format!(
            "unknown {kind} `{name}`; nearest known: {}",
            if near.is_empty() { "(dictionary empty)".to_string() } else { near.join(", ") }
        ))
    })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Top-`k` completions of one query, best first; ties go to the lower id.
pub fn predict(cfg: &RunConfig, req: &PredictRequest, out: &mut dyn Write) -> Result<Vec<Prediction>> {
    echo(cfg, "predict", out);
    let loaded = Loaded::open(cfg, out)?;
    let store = &loaded.store;
    let e = resolve(&store.entities, "entity", &req.entity)?;
    let r = resolve(&store.relations, "relation", &req.relation)?;
    let nr = store.num_relations();
    let pair = match req.direction {
        Direction::Tail => (e, r),
        Direction::Head => (e, r + nr),
    };
    let graph_store = loaded.graph_store();
    let graph = augment(&graph_store);
    let emb: Embeddings<'_> = loaded.ck.model.embed(&graph)?;
    let scores = emb.score_batch(&[pair])?.into_data();
    let known = known_tails(&graph_store, SplitSet::TRAIN);
    let rows: Vec<Prediction> = descending_order(&scores)
        .into_iter()
        .filter(|c| req.include_known || !known.contains(pair.0, pair.1, *c))
        .take(req.k)
        .map(|c| Prediction {
            entity: store.entities.name(c).unwrap_or("?").to_string(),
            probability: sigmoid(scores[c]),
            score: scores[c],
        })
        .collect();
    let query = match req.direction {
        Direction::Tail => format!("({}, {}, ?)", req.entity, req.relation),
        Direction::Head => format!("(?, {}, {})", req.relation, req.entity),
    };
    say!(out, "query {query}");
    say!(out, "rank\tentity\tprobability\tscore");
    for (i, p) in rows.iter().enumerate() {
        say!(out, "{}\t{}\t{:.6}\t{:.6}", i + 1, p.entity, p.probability, p.score);
    }
    Ok(rows)
}

/// Writes the entity and relation dictionaries of the dataset.
pub fn export(cfg: &RunConfig, out: &mut dyn Write) -> Result<[PathBuf; 2]> {
    echo(cfg, "export-dicts", out);
    let (store, report) = load_dataset(&cfg.dataset)?;
    say!(out, "{}", load_report_summary(&report));
    let paths = export_dicts(&store, &cfg.output)?;
    for p in &paths {
        say!(out, "wrote {}", p.display());
    }
    Ok(paths)
}
