//! Self-training: label the model's best unseen guesses for held-out condition
//! pairs as positives and retrain on the enlarged training set.
//!
//! Generation is greedy. For every condition pair the candidates are sorted by
//! descending score (ties by ascending entity id), and the first candidate that
//! is not already a training fact, in either direction, becomes the new tail.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::data::{known_tails, KnownTails, SplitSet, Triple, TripleStore};
use crate::model::{Model, Scorer};
use crate::train::{fit, FitOutcome, TrainConfig};
use crate::{Error, Result};

/// Condition pairs `(entity, relation)` taken from held-out triples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConditionPairSet {
    pub pairs: Vec<(usize, usize)>,
    pub source: SplitSet,
}

/// Forward `(h, r)` and inverse `(t, r + R)` pairs of every source triple,
/// deduplicated in first-appearance order.
pub fn build_condition_pairs(store: &TripleStore, source: SplitSet) -> Result<ConditionPairSet> {
    if source.is_empty() {
        return Err(Error::Config("self-training needs at least one source split".into()));
    }
    let nr = store.num_relations();
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::new();
    for split in source.iter() {
        for t in store.split(split) {
            for p in [(t.head, t.relation), (t.tail, t.relation + nr)] {
                if seen.insert(p) {
                    pairs.push(p);
                }
            }
        }
    }
    Ok(ConditionPairSet { pairs, source })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Generation {
    /// At most one triple per condition pair, in pair order. Relations may be
    /// inverse ids (`≥ R`).
    pub triples: Vec<Triple>,
    /// Pairs for which every candidate was already known.
    pub skipped: Vec<(usize, usize)>,
}

impl Generation {
    /// Generated facts rewritten in forward orientation and deduplicated.
    pub fn canonical(&self, num_relations: usize) -> Vec<Triple> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for t in &self.triples {
            let f = canonical_triple(*t, num_relations);
            if seen.insert(f) {
                out.push(f);
            }
        }
        out
    }
}

/// `(e, r + R, x)` becomes `(x, r, e)`; forward triples are unchanged.
pub fn canonical_triple(t: Triple, num_relations: usize) -> Triple {
    if t.relation >= num_relations {
        Triple::new(t.tail, t.relation - num_relations, t.head)
    } else {
        t
    }
}

/// Candidates by descending score, ties by ascending id.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Greedy best-unseen-neighbour generation over `pairs`.
pub fn generate_new_triples<S: Scorer + ?Sized>(
    scorer: &S,
    known_train: &KnownTails,
    pairs: &ConditionPairSet,
    batch_size: usize,
) -> Result<Generation> {
    let n = scorer.num_entities();
    let mut out = Generation::default();
    for chunk in pairs.pairs.chunks(batch_size.max(1)) {
        let scores = scorer.score_batch(chunk)?;
        for (i, &(e, r)) in chunk.iter().enumerate() {
            let row = &scores.data()[i * n..(i + 1) * n];
            let pick = descending_order(row)
                .into_iter()
                .find(|&t| !known_train.contains(e, r, t));
            match pick {
                Some(t) => out.triples.push(Triple::new(e, r, t)),
                None => out.skipped.push((e, r)),
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfTrainConfig {
    pub source: SplitSet,
    /// Generate-then-retrain rounds.
    pub rounds: usize,
    /// Retraining keeps the trainer's patience but caps epochs here.
    pub retrain_epochs: usize,
    /// Continue from the pretrained parameters rather than re-initialising.
    pub warm_start: bool,
    /// With generation off, each round simply resumes training on the
    /// original training split.
    pub generate: bool,
    pub generation_batch: usize,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        SelfTrainConfig {
            source: SplitSet::HELD_OUT,
            rounds: 1,
            retrain_epochs: 300,
            warm_start: true,
            generate: true,
            generation_batch: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub generation: Generation,
    /// Canonical generated facts not already in the training split.
    pub added: Vec<Triple>,
    pub train_size: usize,
    pub fit: FitOutcome,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfTrainOutcome {
    pub model: Model,
    pub rounds: Vec<RoundReport>,
    /// Training split after the last round.
    pub train_store: TripleStore,
}

/// Generates from `pretrained`, merges the new facts into train and refits.
///
/// `validate(model, graph, round, epoch)` returns the validation MRR used for
/// early stopping; it should score against the original `store`.
pub fn self_train<F>(
    pretrained: Model,
    store: &TripleStore,
    train_config: &TrainConfig,
    config: &SelfTrainConfig,
    mut validate: F,
) -> Result<SelfTrainOutcome>
where
    F: FnMut(&Model, &crate::data::AugmentedGraph, usize, usize) -> Result<f64>,
{
    if config.rounds == 0 {
        return Err(Error::Config("self-training needs at least one round".into()));
    }
    let pairs = build_condition_pairs(store, config.source)?;
    let nr = store.num_relations();
    let mut model = pretrained;
    let mut current = store.clone();
    let mut rounds = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let graph = crate::data::augment(&current);
        let known = known_tails(&current, SplitSet::TRAIN);
        let generation = if config.generate {
            let emb = model.embed(&graph)?;
            generate_new_triples(&emb, &known, &pairs, config.generation_batch)?
        } else {
            Generation::default()
        };
        let existing: BTreeSet<Triple> = current.train.iter().copied().collect();
        let added: Vec<Triple> = generation
            .canonical(nr)
            .into_iter()
            .filter(|t| !existing.contains(t))
            .collect();
        current = current.with_extra_train(&added);
        if !config.warm_start {
            model = Model::new(model.config.clone(), train_config.seed)?;
        }
        let mut cfg = train_config.clone();
        cfg.epochs_max = config.retrain_epochs;
        let outcome = fit(&mut model, &current, &cfg, |m, g, epoch| validate(m, g, round, epoch))?;
        rounds.push(RoundReport {
            generation,
            added,
            train_size: current.train.len(),
            fit: outcome,
        });
    }
    Ok(SelfTrainOutcome {
        model,
        rounds,
        train_store: current,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct Table(Vec<Vec<f64>>, Vec<(usize, usize)>);

    impl Scorer for Table {
        fn num_entities(&self) -> usize {
            self.0[0].len()
        }
        fn score_batch(&self, pairs: &[(usize, usize)]) -> Result<Tensor> {
            let mut data = Vec::new();
            for p in pairs {
                let i = self.1.iter().position(|q| q == p).unwrap();
                data.extend_from_slice(&self.0[i]);
            }
            Tensor::new(alloc::vec![pairs.len(), self.num_entities()], data)
        }
    }

    fn store() -> TripleStore {
        TripleStore::from_ids(
            4,
            1,
            alloc::vec![Triple::new(0, 0, 1)],
            alloc::vec![Triple::new(0, 0, 2), Triple::new(0, 0, 3)],
            alloc::vec![],
        )
        .unwrap()
    }

    #[test]
    fn condition_pairs_dedup() {
        let s = store();
        let p = build_condition_pairs(&s, SplitSet::HELD_OUT).unwrap();
        assert_eq!(p.pairs, alloc::vec![(0, 0), (2, 1), (3, 1)]);
        assert!(build_condition_pairs(&s, SplitSet::NONE).is_err());
    }

    #[test]
    fn greedy_skips_known_tail() {
        let s = store();
        let known = known_tails(&s, SplitSet::TRAIN);
        let table = Table(alloc::vec![alloc::vec![0.1, 0.9, 0.5, 0.2]], alloc::vec![(0, 0)]);
        let pairs = ConditionPairSet {
            pairs: alloc::vec![(0, 0)],
            source: SplitSet::HELD_OUT,
        };
        let g = generate_new_triples(&table, &known, &pairs, 8).unwrap();
        assert_eq!(g.triples, alloc::vec![Triple::new(0, 0, 2)]);
    }

    #[test]
    fn unconstrained_pair_takes_top_candidate() {
        let s = store();
        let known = known_tails(&s, SplitSet::TRAIN);
        let table = Table(alloc::vec![alloc::vec![0.3, 0.1, 0.2, 0.8]], alloc::vec![(2, 1)]);
        let pairs = ConditionPairSet {
            pairs: alloc::vec![(2, 1)],
            source: SplitSet::HELD_OUT,
        };
        let g = generate_new_triples(&table, &known, &pairs, 8).unwrap();
        assert_eq!(g.triples, alloc::vec![Triple::new(2, 1, 3)]);
        assert_eq!(g.canonical(1), alloc::vec![Triple::new(3, 0, 2)]);
    }

    #[test]
    fn fully_known_pair_is_skipped() {
        let s = TripleStore::from_ids(2, 1, alloc::vec![Triple::new(0, 0, 0), Triple::new(0, 0, 1)], alloc::vec![], alloc::vec![]).unwrap();
        let known = known_tails(&s, SplitSet::TRAIN);
        let table = Table(alloc::vec![alloc::vec![0.3, 0.1]], alloc::vec![(0, 0)]);
        let pairs = ConditionPairSet {
            pairs: alloc::vec![(0, 0)],
            source: SplitSet::HELD_OUT,
        };
        let g = generate_new_triples(&table, &known, &pairs, 8).unwrap();
        assert!(g.triples.is_empty());
        assert_eq!(g.skipped, alloc::vec![(0, 0)]);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        assert_eq!(descending_order(&[0.5, 0.7, 0.5, 0.7]), alloc::vec![1, 3, 0, 2]);
    }
}
