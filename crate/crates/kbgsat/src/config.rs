//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown keys are rejected. Values from a file are overridden by
//! command-line settings. Relative paths in a file are resolved against the
//! file's directory; relative paths given on the command line are resolved
//! against the working directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use kbgsat_core::data::{Split, SplitSet};
use kbgsat_core::decoder::{ConvEConfig, DecoderKind};
use kbgsat_core::encoder::{Activation, AttentionMode, EncoderConfig};
use kbgsat_core::eval::FilterPolicy;
use kbgsat_core::model::ModelConfig;
use kbgsat_core::selftrain::SelfTrainConfig;
use kbgsat_core::train::TrainConfig;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Every accepted key with its default and a one-line description, in echo order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("dataset", "", "directory holding train.txt, valid.txt and test.txt"),
    ("output", "out", "directory receiving checkpoints, histories and reports"),
    ("checkpoint", "", "input checkpoint for selftrain/eval/predict (default: <output>/model.ckpt)"),
    ("seed", "0", "single source of all randomness"),
    ("workers", "0", "evaluation threads; 0 = available processors, 1 = bit-reproducible"),
    ("dim", "200", "embedding dimension d"),
    ("layers", "2", "encoder layers L (1 or 2)"),
    ("attention", "kbgsat", "kbgsat (self-attention) or kbgat (global attention vector)"),
    ("activation", "tanh", "layer activation: tanh or relu"),
    ("dropout", "0.1", "rate for attention coefficients and layer outputs"),
    ("decoder", "conve", "transe, distmult or conve"),
    ("conve.channels", "32", "ConvE kernel count"),
    ("conve.kernel", "3x3", "ConvE kernel size HxW"),
    ("conve.reshape", "auto", "ConvE reshape RxC of each embedding, or auto (most square, R <= C)"),
    ("lr", "0.001", "Adam learning rate"),
    ("batch_size", "128", "condition pairs per batch"),
    ("epochs_max", "500", "pretraining epoch cap"),
    ("patience", "20", "epochs without valid MRR improvement before stopping"),
    ("label_smoothing", "0", "q <- (1 - s) q + s / |E|"),
    ("filter", "standard", "filtering protocol: standard (train+valid+test) or train"),
    ("adam.beta1", "0.9", "Adam first-moment decay"),
    ("adam.beta2", "0.999", "Adam second-moment decay"),
    ("adam.eps", "1e-8", "Adam denominator epsilon"),
    ("eval.split", "test", "split evaluated by the eval command: valid or test"),
    ("eval.batch_size", "256", "queries scored per evaluation batch"),
    ("selftrain.source", "valid,test", "splits whose condition pairs drive generation"),
    ("selftrain.rounds", "1", "generate-then-retrain rounds"),
    ("selftrain.epochs", "300", "retraining epoch cap per round"),
    ("selftrain.warm_start", "true", "retrain from the pretrained parameters (false: reinitialise)"),
    ("selftrain.generate", "true", "false turns self-training into a plain training resume"),
    ("predict.k", "10", "rows returned by predict"),
];

/// Keys whose values cannot change a trained model; excluded from the config hash.
const NON_SEMANTIC: &[&str] = &[
    "dataset",
    "output",
    "checkpoint",
    "workers",
    "eval.split",
    "eval.batch_size",
    "predict.k",
];

fn default_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d)
}

/// Documented reference text listing every key with its default.
pub fn reference() -> String {
    let mut s = String::from("# kbgsat run configuration (key = value)\n");
    for (k, d, doc) in KEYS {
        let _ = writeln!(s, "# {doc}\n{k} = {d}");
    }
    s
}

/// Parses config text into raw key/value pairs. `base` resolves relative paths.
pub fn parse_text(text: &str, base: Option<&Path>) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("config line {}: expected `key = value`", i + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if default_of(k).is_none() {
            return Err(CliError::Usage(format!("config line {}: unknown key `{k}`", i + 1)));
        }
        if out.contains_key(k) {
            return Err(CliError::Usage(format!("config line {}: key `{k}` set twice", i + 1)));
        }
        let v = match base {
            Some(b) if is_path_key(k) && !v.is_empty() && Path::new(v).is_relative() => {
                b.join(v).to_string_lossy().into_owned()
            }
            _ => v.to_string(),
        };
        out.insert(k.to_string(), v);
    }
    Ok(out)
}

fn is_path_key(k: &str) -> bool {
    matches!(k, "dataset" | "output" | "checkpoint")
}

/// Fully resolved, typed configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,
    /// Input checkpoint; defaults to `<output>/model.ckpt`.
    pub checkpoint: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub dim: usize,
    pub layers: usize,
    pub attention: AttentionMode,
    pub activation: Activation,
    pub dropout: f64,
    pub decoder: String,
    pub conve_channels: usize,
    pub conve_kernel: (usize, usize),
    pub conve_reshape: (usize, usize),
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_max: usize,
    pub patience: usize,
    pub label_smoothing: f64,
    pub filter: FilterPolicy,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub eval_split: Split,
    pub eval_batch_size: usize,
    pub selftrain_source: SplitSet,
    pub selftrain_rounds: usize,
    pub selftrain_epochs: usize,
    pub selftrain_warm_start: bool,
    pub selftrain_generate: bool,
    pub predict_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_map(&BTreeMap::new()).expect("defaults are valid")
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("`{key}`: cannot parse `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::Usage(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn pair(key: &str, v: &str) -> Result<(usize, usize)> {
    let (a, b) = v
        .split_once('x')
        .ok_or_else(|| CliError::Usage(format!("`{key}`: expected RxC, got `{v}`")))?;
    Ok((num(key, a.trim())?, num(key, b.trim())?))
}

fn split_set(key: &str, v: &str) -> Result<SplitSet> {
    let mut set = SplitSet::NONE;
    for part in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let s = Split::parse(part).ok_or_else(|| CliError::Usage(format!("`{key}`: unknown split `{part}`")))?;
        set = set.with(s);
    }
    Ok(set)
}

fn split_set_text(s: SplitSet) -> String {
    s.iter().map(Split::name).collect::<Vec<_>>().join(",")
}

fn float_text(v: f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    /// Loads `file` (if any) and applies `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut map = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                parse_text(&text, path.parent())?
            }
            None => BTreeMap::new(),
        };
        for (k, v) in overrides {
            if default_of(k).is_none() {
                return Err(CliError::Usage(format!("unknown key `{k}`")));
            }
            map.insert(k.clone(), v.clone());
        }
        RunConfig::from_map(&map)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<RunConfig> {
        let get = |k: &str| -> &str { map.get(k).map(String::as_str).unwrap_or_else(|| default_of(k).unwrap()) };
        let attention = AttentionMode::parse(get("attention"))
            .ok_or_else(|| CliError::Usage(format!("`attention`: expected kbgsat or kbgat, got `{}`", get("attention"))))?;
        let activation = Activation::parse(get("activation"))
            .ok_or_else(|| CliError::Usage(format!("`activation`: expected tanh or relu, got `{}`", get("activation"))))?;
        let filter = FilterPolicy::parse(get("filter"))
            .ok_or_else(|| CliError::Usage(format!("`filter`: expected train or standard, got `{}`", get("filter"))))?;
        let decoder = get("decoder").to_string();
        if !matches!(decoder.as_str(), "transe" | "distmult" | "conve") {
            return Err(CliError::Usage(format!(
                "`decoder`: expected transe, distmult or conve, got `{decoder}`"
            )));
        }
        let eval_split = Split::parse(get("eval.split"))
            .filter(|s| *s != Split::Train)
            .ok_or_else(|| CliError::Usage(format!("`eval.split`: expected valid or test, got `{}`", get("eval.split"))))?;
        let workers: usize = num("workers", get("workers"))?;
        let workers = if workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            workers
        };
        let dim: usize = num("dim", get("dim"))?;
        let reshape = match get("conve.reshape") {
            "auto" => {
                let c = ConvEConfig::default_for(dim);
                (c.rows, c.cols)
            }
            v => pair("conve.reshape", v)?,
        };
        let output = PathBuf::from(get("output"));
        let checkpoint = match get("checkpoint") {
            "" => output.join("model.ckpt"),
            v => PathBuf::from(v),
        };
        let cfg = RunConfig {
            dataset: PathBuf::from(get("dataset")),
            output,
            checkpoint,
            seed: num("seed", get("seed"))?,
            workers,
            dim,
            layers: num("layers", get("layers"))?,
            attention,
            activation,
            dropout: num("dropout", get("dropout"))?,
            decoder,
            conve_channels: num("conve.channels", get("conve.channels"))?,
            conve_kernel: pair("conve.kernel", get("conve.kernel"))?,
            conve_reshape: reshape,
            lr: num("lr", get("lr"))?,
            batch_size: num("batch_size", get("batch_size"))?,
            epochs_max: num("epochs_max", get("epochs_max"))?,
            patience: num("patience", get("patience"))?,
            label_smoothing: num("label_smoothing", get("label_smoothing"))?,
            filter,
            betas: (num("adam.beta1", get("adam.beta1"))?, num("adam.beta2", get("adam.beta2"))?),
            adam_eps: num("adam.eps", get("adam.eps"))?,
            eval_split,
            eval_batch_size: num("eval.batch_size", get("eval.batch_size"))?,
            selftrain_source: split_set("selftrain.source", get("selftrain.source"))?,
            selftrain_rounds: num("selftrain.rounds", get("selftrain.rounds"))?,
            selftrain_epochs: num("selftrain.epochs", get("selftrain.epochs"))?,
            selftrain_warm_start: boolean("selftrain.warm_start", get("selftrain.warm_start"))?,
            selftrain_generate: boolean("selftrain.generate", get("selftrain.generate"))?,
            predict_k: num("predict.k", get("predict.k"))?,
        };
        // Inconsistent values are configuration mistakes whatever layer detects them.
        let usage = |e: kbgsat_core::Error| CliError::Usage(e.to_string());
        cfg.encoder().validate().map_err(usage)?;
        cfg.decoder_kind()?.validate(cfg.dim).map_err(usage)?;
        cfg.train_config().validate().map_err(usage)?;
        if cfg.eval_batch_size == 0 {
            return Err(CliError::Usage("`eval.batch_size` must be at least 1".into()));
        }
        Ok(cfg)
    }

    /// Resolved values in [`KEYS`] order, formatted canonically.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Path| p.to_string_lossy().into_owned();
        KEYS.iter()
            .map(|(k, _, _)| {
                let v = match *k {
                    "dataset" => path(&self.dataset),
                    "output" => path(&self.output),
                    "checkpoint" => path(&self.checkpoint),
                    "seed" => self.seed.to_string(),
                    "workers" => self.workers.to_string(),
                    "dim" => self.dim.to_string(),
                    "layers" => self.layers.to_string(),
                    "attention" => self.attention.name().to_string(),
                    "activation" => self.activation.name().to_string(),
                    "dropout" => float_text(self.dropout),
                    "decoder" => self.decoder.clone(),
                    "conve.channels" => self.conve_channels.to_string(),
                    "conve.kernel" => format!("{}x{}", self.conve_kernel.0, self.conve_kernel.1),
                    "conve.reshape" => format!("{}x{}", self.conve_reshape.0, self.conve_reshape.1),
                    "lr" => float_text(self.lr),
                    "batch_size" => self.batch_size.to_string(),
                    "epochs_max" => self.epochs_max.to_string(),
                    "patience" => self.patience.to_string(),
                    "label_smoothing" => float_text(self.label_smoothing),
                    "filter" => self.filter.name().to_string(),
                    "adam.beta1" => float_text(self.betas.0),
                    "adam.beta2" => float_text(self.betas.1),
                    "adam.eps" => float_text(self.adam_eps),
                    "eval.split" => self.eval_split.name().to_string(),
                    "eval.batch_size" => self.eval_batch_size.to_string(),
                    "selftrain.source" => split_set_text(self.selftrain_source),
                    "selftrain.rounds" => self.selftrain_rounds.to_string(),
                    "selftrain.epochs" => self.selftrain_epochs.to_string(),
                    "selftrain.warm_start" => self.selftrain_warm_start.to_string(),
                    "selftrain.generate" => self.selftrain_generate.to_string(),
                    "predict.k" => self.predict_k.to_string(),
                    other => unreachable!("key {other} has no formatter"),
                };
                (*k, v)
            })
            .collect()
    }

    /// The resolved configuration as config-file text.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 over the keys that influence training, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !NON_SEMANTIC.contains(&k) {
                h.update(format!("{k} = {v}\n"));
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            layers: self.layers,
            attention: self.attention,
            activation: self.activation,
            dropout: self.dropout,
        }
    }

    pub fn conve_config(&self) -> ConvEConfig {
        let mut c = ConvEConfig::default_for(self.dim);
        c.channels = self.conve_channels;
        (c.kernel_h, c.kernel_w) = self.conve_kernel;
        (c.rows, c.cols) = self.conve_reshape;
        c
    }

    pub fn decoder_kind(&self) -> Result<DecoderKind> {
        Ok(match self.decoder.as_str() {
            "transe" => DecoderKind::TransE,
            "distmult" => DecoderKind::DistMult,
            "conve" => DecoderKind::ConvE(self.conve_config()),
            other => return Err(CliError::Usage(format!("unknown decoder `{other}`"))),
        })
    }

    pub fn model_config(&self, num_entities: usize, num_relations: usize) -> Result<ModelConfig> {
        Ok(ModelConfig {
            num_entities,
            num_relations,
            encoder: self.encoder(),
            decoder: self.decoder_kind()?,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs_max: self.epochs_max,
            patience: self.patience,
            seed: self.seed,
            label_smoothing: self.label_smoothing,
            filter: self.filter,
            betas: self.betas,
            adam_eps: self.adam_eps,
        }
    }

    pub fn selftrain_config(&self) -> SelfTrainConfig {
        SelfTrainConfig {
            source: self.selftrain_source,
            rounds: self.selftrain_rounds,
            retrain_epochs: self.selftrain_epochs,
            warm_start: self.selftrain_warm_start,
            generate: self.selftrain_generate,
            ..SelfTrainConfig::default()
        }
    }
}
