//! Argument parsing and dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::error::{exit, CliError, Result};
use crate::runner::{self, Direction, PredictRequest};

#[derive(Parser, Debug)]
#[command(
    name = "kbgsat",
    version,
    about = "Knowledge-graph link prediction with a graph self-attention encoder",
    after_help = "Configuration keys are read from a key = value file (--config) and overridden \
                  by --set KEY=VALUE and then by the dedicated flags. configs/reference.conf lists \
                  every key with its default."
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum DecoderArg {
    Transe,
    Distmult,
    Conve,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum AttentionArg {
    Kbgsat,
    Kbgat,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum FilterArg {
    Train,
    Standard,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum DirectionArg {
    Tail,
    Head,
}

#[derive(Args, Debug, Default)]
pub struct GlobalArgs {
    /// Flat key = value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override any configuration key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Dataset directory with train/valid/test triple files.
    #[arg(long, global = true, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub output: Option<PathBuf>,
    /// Checkpoint to write (train) or read (selftrain, eval, predict).
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Seed for every random choice (initialisation, batching, dropout).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub decoder: Option<DecoderArg>,
    /// Encoder layers (1 or 2).
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub layers: Option<u8>,
    #[arg(long, global = true, value_enum)]
    pub attention: Option<AttentionArg>,
    /// Filter policy for ranking: train-only or train+valid+test.
    #[arg(long, global = true, value_enum)]
    pub filter: Option<FilterArg>,
    /// Evaluation threads; 0 uses every available core, 1 is bit-reproducible.
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain a model and write its checkpoint, history and metrics.
    Train,
    /// Generate triples from a checkpoint and retrain on the extended graph.
    Selftrain,
    /// Filtered ranking metrics of a checkpoint on one split.
    Eval {
        /// train, valid or test (default: the `eval.split` key).
        #[arg(long)]
        split: Option<String>,
    },
    /// Top-k completions of a single query.
    Predict {
        /// Known entity of the query, as it appears in the dataset files.
        #[arg(long)]
        entity: String,
        /// Relation of the query, as it appears in the dataset files.
        #[arg(long)]
        relation: String,
        /// Which side of the triple to predict.
        #[arg(long, value_enum, default_value = "tail")]
        direction: DirectionArg,
        /// Number of rows (default: the `predict.k` key).
        #[arg(long)]
        k: Option<usize>,
        /// Keep candidates that already complete the query in the training split.
        #[arg(long)]
        include_known: bool,
    },
    /// Write entities.dict and relations.dict (`id<TAB>name`).
    ExportDicts,
}

impl GlobalArgs {
    /// Key/value overrides in application order: `--set` first, then the
    /// dedicated flags.
    pub fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));
        let path = |p: &PathBuf| p.to_string_lossy().into_owned();
        if let Some(p) = &self.dataset {
            push("dataset", path(p));
        }
        if let Some(p) = &self.output {
            push("output", path(p));
        }
        if let Some(p) = &self.checkpoint {
            push("checkpoint", path(p));
        }
        if let Some(s) = self.seed {
            push("seed", s.to_string());
        }
        if let Some(d) = self.decoder {
            push("decoder", d.to_possible_value().expect("named").get_name().to_string());
        }
        if let Some(l) = self.layers {
            push("layers", l.to_string());
        }
        if let Some(a) = self.attention {
            push("attention", a.to_possible_value().expect("named").get_name().to_string());
        }
        if let Some(f) = self.filter {
            push("filter", f.to_possible_value().expect("named").get_name().to_string());
        }
        if let Some(w) = self.workers {
            push("workers", w.to_string());
        }
        Ok(out)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides()?)
    }
}

fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = cli.global.resolve()?;
    match &cli.command {
        Command::Train => runner::train(&cfg, out),
        Command::Selftrain => runner::selftrain(&cfg, out),
        Command::Eval { split } => {
            let split = match split {
                Some(s) => runner::parse_split(s)?,
                None => cfg.eval_split,
            };
            runner::eval(&cfg, split, out).map(|_| ())
        }
        Command::Predict {
            entity,
            relation,
            direction,
            k,
            include_known,
        } => {
            let req = PredictRequest {
                entity: entity.clone(),
                relation: relation.clone(),
                direction: match direction {
                    DirectionArg::Tail => Direction::Tail,
                    DirectionArg::Head => Direction::Head,
                },
                k: k.unwrap_or(cfg.predict_k),
                include_known: *include_known,
            };
            runner::predict(&cfg, &req, out).map(|_| ())
        }
        Command::ExportDicts => runner::export(&cfg, out).map(|_| ()),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status. Progress goes to `stdout`, errors to `stderr`.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    exit::SUCCESS
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    exit::USAGE
                }
            };
        }
    };
    match run(&cli, stdout) {
        Ok(()) => exit::SUCCESS,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
