//! End-to-end runs of every subcommand on small fixtures.

mod common;

use std::fs;
use std::path::{Path, PathBuf};

use common::{run, small_config, toy_dataset};
use kbgsat::checkpoint::Checkpoint;
use kbgsat::error::exit;
use kbgsat::io::{load_dataset, triples_in};
use kbgsat_core::data::{augment, Split};
use kbgsat_core::eval::{evaluate_split, FilterPolicy, DEFAULT_KS};
use kbgsat_core::train::fit_on_valid;

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    out: PathBuf,
    conf: PathBuf,
}

impl Fixture {
    fn new(extra: &str) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("toy");
        toy_dataset(&data);
        let conf = small_config(dir.path(), extra);
        Fixture {
            data,
            out: dir.path().join("out"),
            conf,
            _dir: dir,
        }
    }

    fn args<'a>(&'a self, cmd: &'a str, rest: &[&'a str]) -> Vec<&'a str> {
        let mut v = vec![
            cmd,
            "--config",
            self.conf.to_str().unwrap(),
            "--dataset",
            self.data.to_str().unwrap(),
            "--output",
            self.out.to_str().unwrap(),
        ];
        v.extend_from_slice(rest);
        v
    }

    fn run(&self, cmd: &str, rest: &[&str]) -> (i32, String, String) {
        run(&self.args(cmd, rest))
    }

    fn train(&self) -> String {
        let (code, out, err) = self.run("train", &[]);
        assert_eq!(code, exit::SUCCESS, "stdout:\n{out}\nstderr:\n{err}");
        out
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_writes_checkpoint_history_and_echoes_config() {
    let f = Fixture::new("");
    let out = f.train();
    assert!(out.contains("dim = 8") && out.contains("decoder = distmult"), "{out}");
    assert!(out.contains("# config hash "));
    assert!(f.path("model.ckpt").is_file());
    let history = json(&f.path("history.json"));
    assert!(!history["epochs"].as_array().unwrap().is_empty());
    assert!(history["epochs"][0]["loss"].as_f64().unwrap().is_finite());
    let report = json(&f.path("load_report.json"));
    assert_eq!(report["entities"], 8);
    let metrics = json(&f.path("metrics_test.json"));
    for key in ["mr", "mrr", "n_queries", "filter_policy"] {
        assert!(metrics.get(key).is_some(), "missing {key}");
    }
    for k in ["1", "3", "10"] {
        assert!(metrics["hits"][k].is_number());
    }
    // The resolved configuration round-trips through the config parser.
    let (code, _, err) = run(&[
        "eval",
        "--config",
        f.path("resolved.conf").to_str().unwrap(),
        "--workers",
        "1",
    ]);
    assert_eq!(code, exit::SUCCESS, "{err}");
}

#[test]
fn missing_dataset_fails_without_outputs() {
    let f = Fixture::new("");
    let missing = f.data.with_file_name("nowhere");
    let (code, _, err) = run(&[
        "train",
        "--config",
        f.conf.to_str().unwrap(),
        "--dataset",
        missing.to_str().unwrap(),
        "--output",
        f.out.to_str().unwrap(),
    ]);
    assert_eq!(code, exit::DATA, "{err}");
    assert!(err.contains("not found"), "{err}");
    assert!(!f.out.exists(), "output directory must not be created");
}

#[test]
fn same_seed_gives_identical_checkpoints_and_metrics() {
    let a = Fixture::new("");
    let b = Fixture::new("");
    a.train();
    b.train();
    for name in ["model.ckpt", "history.json", "metrics_test.json"] {
        assert_eq!(fs::read(a.path(name)).unwrap(), fs::read(b.path(name)).unwrap(), "{name}");
    }
    let c = Fixture::new("");
    let (code, _, err) = c.run("train", &["--seed", "4"]);
    assert_eq!(code, exit::SUCCESS, "{err}");
    assert_ne!(fs::read(a.path("model.ckpt")).unwrap(), fs::read(c.path("model.ckpt")).unwrap());
}

#[test]
fn eval_matches_library_exactly() {
    let f = Fixture::new("");
    f.train();
    for (split, policy, flag) in [
        (Split::Test, FilterPolicy::Standard, "standard"),
        (Split::Valid, FilterPolicy::TrainOnly, "train"),
    ] {
        let (code, out, err) = f.run("eval", &["--split", split.name(), "--filter", flag, "--workers", "3"]);
        assert_eq!(code, exit::SUCCESS, "{err}");
        assert!(out.contains("MRR"), "{out}");
        let got = json(&f.path(&format!("metrics_{}.json", split.name())));
        let (store, _) = load_dataset(&f.data).unwrap();
        let ck = Checkpoint::load(&f.path("model.ckpt")).unwrap();
        let emb = ck.model.embed(&augment(&store)).unwrap();
        let m = evaluate_split(&emb, &store, split, policy, &DEFAULT_KS).unwrap();
        assert_eq!(got["mr"].as_f64().unwrap(), m.mr);
        assert_eq!(got["mrr"].as_f64().unwrap(), m.mrr);
        for (k, h) in &m.hits {
            assert_eq!(got["hits"][k.to_string()].as_f64().unwrap(), *h);
        }
        assert_eq!(got["n_queries"].as_u64().unwrap() as usize, m.n_queries);
        assert_eq!(got["filter_policy"], flag);
    }
}

#[test]
fn eval_rejects_unknown_split() {
    let f = Fixture::new("");
    f.train();
    let (code, _, err) = f.run("eval", &["--split", "dev"]);
    assert_eq!(code, exit::USAGE);
    assert!(err.contains("unknown split"), "{err}");
}

#[test]
fn predict_ranks_ground_truth_first() {
    let f = Fixture::new("");
    f.train();
    let (code, out, err) = f.run("predict", &["--entity", "B", "--relation", "r0", "--k", "3"]);
    assert_eq!(code, exit::SUCCESS, "{err}");
    let rows: Vec<&str> = out.lines().skip_while(|l| !l.starts_with("rank\t")).skip(1).collect();
    assert_eq!(rows.len(), 3, "{out}");
    assert!(rows[0].starts_with("1\tC\t"), "{out}");
    // Known training tails of (B, r0) are filtered by default.
    for known in ["D", "G", "H"] {
        assert!(!rows.iter().any(|r| r.split('\t').nth(1) == Some(known)), "{out}");
    }
    // Head direction: (?, r0, C) has only B missing from the training split.
    let (code, out, _) = f.run("predict", &["--entity", "C", "--relation", "r0", "--direction", "head", "--k", "1"]);
    assert_eq!(code, exit::SUCCESS);
    assert!(out.lines().any(|l| l == "query (?, r0, C)"), "{out}");
    assert!(out.lines().any(|l| l.starts_with("1\tB\t")), "{out}");
}

#[test]
fn predict_k_larger_than_entity_count() {
    let f = Fixture::new("");
    f.train();
    let rows = |out: &str| out.lines().skip_while(|l| !l.starts_with("rank\t")).skip(1).count();
    let (code, out, _) = f.run("predict", &["--entity", "B", "--relation", "r0", "--k", "100", "--include-known"]);
    assert_eq!(code, exit::SUCCESS);
    assert_eq!(rows(&out), 8);
    let (_, out, _) = f.run("predict", &["--entity", "B", "--relation", "r0", "--k", "100"]);
    assert_eq!(rows(&out), 8 - 3);
}

#[test]
fn predict_unknown_names_list_nearest_keys() {
    let f = Fixture::new("");
    f.train();
    let (code, _, err) = f.run("predict", &["--entity", "Bb", "--relation", "r0"]);
    assert_eq!(code, exit::USAGE);
    assert!(err.contains("unknown entity `Bb`") && err.contains("nearest known: B"), "{err}");
    let (code, _, err) = f.run("predict", &["--entity", "B", "--relation", "r7"]);
    assert_eq!(code, exit::USAGE);
    assert!(err.contains("r0") && err.contains("r1"), "{err}");
}

#[test]
fn selftrain_writes_round_trippable_triples() {
    let f = Fixture::new("");
    f.train();
    let (code, out, err) = f.run("selftrain", &[]);
    assert_eq!(code, exit::SUCCESS, "{out}\n{err}");
    let text = fs::read_to_string(f.path("generated.tsv")).unwrap();
    let (store, _) = load_dataset(&f.data).unwrap();
    let generated = triples_in(&store, &text).unwrap();
    assert!(!generated.is_empty());
    // Appending the file to the training split parses with the same dictionaries.
    let train = fs::read_to_string(f.data.join("train.txt")).unwrap() + &text;
    let valid = fs::read_to_string(f.data.join("valid.txt")).unwrap();
    let test = fs::read_to_string(f.data.join("test.txt")).unwrap();
    let (merged, report) = kbgsat_core::data::TripleStore::parse(&train, &valid, &test).unwrap();
    assert_eq!(merged.entities, store.entities);
    assert_eq!(merged.train.len(), store.train.len() + generated.len());
    assert!(report.is_clean());
    let ck = Checkpoint::load(&f.path("selftrain.ckpt")).unwrap();
    assert_eq!(ck.extra_train, generated);
    let history = json(&f.path("selftrain_history.json"));
    assert_eq!(history["rounds"][0]["added"].as_u64().unwrap() as usize, generated.len());
    // Evaluating the self-trained checkpoint uses the extended graph.
    let (code, _, err) = f.run("eval", &["--checkpoint", f.path("selftrain.ckpt").to_str().unwrap()]);
    assert_eq!(code, exit::SUCCESS, "{err}");
}

#[test]
fn selftrain_without_generation_is_a_training_resume() {
    let f = Fixture::new("selftrain.generate = false\n");
    f.train();
    let (code, out, err) = f.run("selftrain", &[]);
    assert_eq!(code, exit::SUCCESS, "{out}\n{err}");
    assert!(out.contains("generation disabled"));
    assert_eq!(fs::read_to_string(f.path("generated.tsv")).unwrap(), "");
    // Same result as continuing the fit from the checkpoint in the library.
    let (store, _) = load_dataset(&f.data).unwrap();
    let mut model = Checkpoint::load(&f.path("model.ckpt")).unwrap().model;
    let cfg = kbgsat::config::RunConfig::resolve(Some(&f.conf), &[]).unwrap();
    let mut tc = cfg.train_config();
    tc.epochs_max = cfg.selftrain_epochs;
    fit_on_valid(&mut model, &store, &store, &tc).unwrap();
    kbgsat::checkpoint::quantize(&mut model);
    let resumed = Checkpoint::load(&f.path("selftrain.ckpt")).unwrap();
    assert_eq!(resumed.model, model);
    assert!(resumed.extra_train.is_empty());
}

#[test]
fn selftrain_checkpoint_errors() {
    let f = Fixture::new("");
    let (code, _, err) = f.run("selftrain", &[]);
    assert_ne!(code, exit::SUCCESS);
    assert_eq!(code, exit::DATA, "{err}");
    f.train();
    let bad = f.path("bad.ckpt");
    let mut bytes = fs::read(f.path("model.ckpt")).unwrap();
    bytes[..8].copy_from_slice(b"NOTACKPT");
    fs::write(&bad, &bytes).unwrap();
    let (code, _, err) = f.run("selftrain", &["--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(code, exit::DATA);
    assert!(err.contains("checkpoint format") && err.contains("magic"), "{err}");
    let truncated = f.path("short.ckpt");
    let good = fs::read(f.path("model.ckpt")).unwrap();
    fs::write(&truncated, &good[..good.len() - 5]).unwrap();
    let (code, _, err) = f.run("eval", &["--checkpoint", truncated.to_str().unwrap()]);
    assert_eq!(code, exit::DATA);
    assert!(err.contains("checkpoint corrupt"), "{err}");
}

#[test]
fn non_finite_parameters_exit_with_numeric_failure() {
    let f = Fixture::new("selftrain.generate = false\n");
    f.train();
    let mut ck = Checkpoint::load(&f.path("model.ckpt")).unwrap();
    ck.model.params.get_mut("entity").unwrap().data_mut()[0] = f64::NAN;
    let nan = f.path("nan.ckpt");
    ck.save(&nan).unwrap();
    let (code, _, err) = f.run("selftrain", &["--checkpoint", nan.to_str().unwrap()]);
    assert_eq!(code, exit::NUMERIC, "{err}");
}

#[test]
fn export_dicts_writes_id_name_files() {
    let f = Fixture::new("");
    let (code, _, err) = f.run("export-dicts", &[]);
    assert_eq!(code, exit::SUCCESS, "{err}");
    let entities = fs::read_to_string(f.path("entities.dict")).unwrap();
    let (store, _) = load_dataset(&f.data).unwrap();
    assert_eq!(entities, store.entities.to_tsv());
    assert!(entities.starts_with("0\tA\n"));
    assert_eq!(fs::read_to_string(f.path("relations.dict")).unwrap(), "0\tr0\n1\tr1\n");
}

#[test]
fn config_errors_are_usage_errors() {
    let f = Fixture::new("learning_rate = 0.1\n");
    let (code, _, err) = f.run("train", &[]);
    assert_eq!(code, exit::USAGE);
    assert!(err.contains("learning_rate"), "{err}");
    let g = Fixture::new("");
    let (code, _, _) = g.run("train", &["--set", "lr=1.5"]);
    assert_eq!(code, exit::USAGE);
    let (code, _, _) = g.run("train", &["--decoder", "rescal"]);
    assert_eq!(code, exit::USAGE);
}
