//! 1-N training with Adam and early stopping on validation MRR.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::data::{augment, known_tails, AugmentedGraph, KnownTails, SplitSet, TripleStore};
use crate::decoder::smooth_labels;
use crate::eval::{Evaluator, FilterPolicy, DEFAULT_KS};
use crate::model::{Model, ParamStore};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::{seeded_rng, Error, Result, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Condition pairs per batch.
    pub batch_size: usize,
    pub epochs_max: usize,
    pub patience: usize,
    pub seed: u64,
    pub label_smoothing: f64,
    pub filter: FilterPolicy,
    pub betas: (f64, f64),
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 128,
            epochs_max: 500,
            patience: 20,
            seed: 0,
            label_smoothing: 0.0,
            filter: FilterPolicy::Standard,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr < 1.0) {
            return Err(Error::Config(format!("lr {} outside (0, 1)", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    /// Generator for shuffling and dropout; independent of the init stream.
    pub fn training_rng(&self) -> Rng {
        seeded_rng(self.seed ^ 0x5eed_7a11_0000_0001)
    }
}

/// Condition pairs and their dense 1-N label rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub pairs: Vec<(usize, usize)>,
    /// `pairs.len() × |E|`, 1 where the tail is a known training fact.
    pub labels: Tensor,
}

/// Shuffles the distinct condition pairs of the augmented graph and cuts them
/// into batches. Every unobserved tail is labelled 0.
pub fn make_batches(
    graph: &AugmentedGraph,
    known: &KnownTails,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<Batch>> {
    if graph.triples().is_empty() {
        return Err(Error::Contract("cannot batch an empty graph".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut pairs: Vec<(usize, usize)> = graph.triples().iter().map(|t| (t.head, t.relation)).collect();
    pairs.sort_unstable();
    pairs.dedup();
    pairs.shuffle(rng);
    let n = graph.num_entities();
    Ok(pairs
        .chunks(batch_size)
        .map(|chunk| {
            let mut labels = vec![0.0; chunk.len() * n];
            for (i, (e, r)) in chunk.iter().enumerate() {
                for &t in known.get(*e, *r) {
                    labels[i * n + t] = 1.0;
                }
            }
            Batch {
                pairs: chunk.to_vec(),
                labels: Tensor::new(vec![chunk.len(), n], labels).expect("label shape"),
            }
        })
        .collect())
}

/// One pass over `batches`; returns the mean batch loss.
pub fn train_epoch(
    model: &mut Model,
    optimizer: &mut Adam,
    graph: &AugmentedGraph,
    batches: &[Batch],
    label_smoothing: f64,
    rng: &mut Rng,
) -> Result<f64> {
    let mut total = 0.0;
    for (b, batch) in batches.iter().enumerate() {
        let mut labels = batch.labels.clone();
        smooth_labels(&mut labels, label_smoothing)?;
        let (loss, grads) = model.loss_and_grads(graph, &batch.pairs, &labels, true, rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { batch: b, value: loss });
        }
        optimizer.step(&mut model.params, &grads)?;
        if !model.params.all_finite() {
            return Err(Error::Contract(format!("non-finite parameter after batch {b}")));
        }
        total += loss;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Patience-based stopping on a metric where higher is better.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records `metric` for `epoch`; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        let improved = match self.best {
            None => !metric.is_nan(),
            Some((_, b)) => metric > b,
        };
        if improved {
            self.best = Some((epoch, metric));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        (improved, self.stale >= self.patience)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub valid_mrr: f64,
}

/// Parameters captured at the best validation epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub params: ParamStore,
    pub epoch: usize,
    pub valid_mrr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub best: Snapshot,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Trains on `train_store.train`, validating after every epoch with
/// `validate(model, graph, epoch)`. On return the model holds the best
/// parameters.
pub fn fit<F>(model: &mut Model, train_store: &TripleStore, config: &TrainConfig, mut validate: F) -> Result<FitOutcome>
where
    F: FnMut(&Model, &AugmentedGraph, usize) -> Result<f64>,
{
    config.validate()?;
    if train_store.valid.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let graph = augment(train_store);
    let known = known_tails(train_store, SplitSet::TRAIN);
    let mut rng = config.training_rng();
    let mut adam = Adam::with_betas(config.lr, config.betas, config.adam_eps);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut history = Vec::new();
    let mut best: Option<Snapshot> = None;
    let mut stopped_early = false;
    for epoch in 1..=config.epochs_max {
        let batches = make_batches(&graph, &known, config.batch_size, &mut rng)?;
        let loss = train_epoch(model, &mut adam, &graph, &batches, config.label_smoothing, &mut rng)?;
        let mrr = validate(model, &graph, epoch)?;
        history.push(EpochRecord {
            epoch,
            loss,
            valid_mrr: mrr,
        });
        let (improved, stop) = stopper.observe(epoch, mrr);
        if improved {
            best = Some(Snapshot {
                params: model.params.clone(),
                epoch,
                valid_mrr: mrr,
            });
        }
        if stop {
            stopped_early = epoch < config.epochs_max;
            break;
        }
    }
    let best = best.ok_or_else(|| Error::Contract("no epoch produced a usable validation MRR".into()))?;
    model.params = best.params.clone();
    Ok(FitOutcome {
        best,
        history,
        stopped_early,
    })
}

/// [`fit`] validating filtered MRR on `eval_store.valid` under `config.filter`.
pub fn fit_on_valid(
    model: &mut Model,
    train_store: &TripleStore,
    eval_store: &TripleStore,
    config: &TrainConfig,
) -> Result<FitOutcome> {
    let evaluator = Evaluator::new(eval_store, config.filter);
    fit(model, train_store, config, |m, g, _| {
        let emb = m.embed(g)?;
        Ok(evaluator.evaluate(&emb, &eval_store.valid, &DEFAULT_KS)?.mrr)
    })
}
