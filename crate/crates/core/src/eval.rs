//! Filtered ranking and MR / MRR / Hits@k.
//!
//! Ties are resolved by averaging the optimistic and pessimistic rank, so a
//! model that scores everything equally gets the expected random rank.

use alloc::format;
use alloc::vec::Vec;

use crate::data::{known_tails, KnownTails, SplitSet, Triple, TripleStore};
use crate::model::Scorer;
use crate::{Error, Result};

/// Which known facts are removed from the candidate pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterPolicy {
    /// Only training facts are filtered.
    TrainOnly,
    /// Facts from train, valid and test are filtered.
    Standard,
}

impl FilterPolicy {
    pub fn name(self) -> &'static str {
        match self {
            FilterPolicy::TrainOnly => "train",
            FilterPolicy::Standard => "standard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(FilterPolicy::TrainOnly),
            "standard" => Some(FilterPolicy::Standard),
            _ => None,
        }
    }

    pub fn splits(self) -> SplitSet {
        match self {
            FilterPolicy::TrainOnly => SplitSet::TRAIN,
            FilterPolicy::Standard => SplitSet::ALL,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankResult {
    /// `(entity, relation, target)`.
    pub query: (usize, usize, usize),
    pub rank: f64,
}

/// Tie-averaged rank of `target` among candidates not in `filter`.
///
/// `filter` must be sorted and must not contain `target`.
pub fn rank_query(scores: &[f64], target: usize, filter: &[usize]) -> Result<f64> {
    if target >= scores.len() {
        return Err(Error::Contract(format!(
            "target {target} outside {} candidates",
            scores.len()
        )));
    }
    if filter.binary_search(&target).is_ok() {
        return Err(Error::Contract(format!("target {target} is filtered")));
    }
    Ok(rank_ignoring(scores, target, filter))
}

/// Like [`rank_query`] but silently keeps `target` even if it is in `known`.
fn rank_ignoring(scores: &[f64], target: usize, known: &[usize]) -> f64 {
    let ts = scores[target];
    let mut greater = 0usize;
    let mut equal = 0usize;
    let mut filt = known.iter().peekable();
    for (i, s) in scores.iter().enumerate() {
        while filt.peek().is_some_and(|&&f| f < i) {
            filt.next();
        }
        if i == target || filt.peek() == Some(&&i) {
            continue;
        }
        if *s > ts {
            greater += 1;
        } else if *s == ts {
            equal += 1;
        }
    }
    let optimistic = 1.0 + greater as f64;
    let pessimistic = optimistic + equal as f64;
    (optimistic + pessimistic) / 2.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub mr: f64,
    pub mrr: f64,
    /// `(k, fraction of queries with rank ≤ k)`, ascending `k`.
    pub hits: Vec<(usize, f64)>,
    pub n_queries: usize,
    pub filter_policy: FilterPolicy,
}

impl Metrics {
    /// Reduces ranks in the given order.
    pub fn from_ranks(ranks: &[f64], ks: &[usize], filter_policy: FilterPolicy) -> Metrics {
        let n = ranks.len();
        let denom = n.max(1) as f64;
        let mut ks: Vec<usize> = ks.to_vec();
        ks.sort_unstable();
        ks.dedup();
        let hits = ks
            .iter()
            .map(|&k| (k, ranks.iter().filter(|r| **r <= k as f64).count() as f64 / denom))
            .collect();
        Metrics {
            mr: ranks.iter().sum::<f64>() / denom,
            mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / denom,
            hits,
            n_queries: n,
            filter_policy,
        }
    }

    pub fn hits_at(&self, k: usize) -> Option<f64> {
        self.hits.iter().find(|(kk, _)| *kk == k).map(|h| h.1)
    }
}

pub const DEFAULT_KS: [usize; 3] = [1, 3, 10];

/// Tail query `(h, r, ?) = t` and head query `(t, r + R, ?) = h` for each triple.
pub fn queries_for(triples: &[Triple], num_relations: usize) -> Vec<(usize, usize, usize)> {
    let mut q = Vec::with_capacity(2 * triples.len());
    for t in triples {
        q.push((t.head, t.relation, t.tail));
        q.push((t.tail, t.relation + num_relations, t.head));
    }
    q
}

/// Ranks queries against a scorer, filtering with `known`.
pub fn rank_queries<S: Scorer + ?Sized>(
    scorer: &S,
    queries: &[(usize, usize, usize)],
    known: &KnownTails,
    batch_size: usize,
) -> Result<Vec<RankResult>> {
    let n = scorer.num_entities();
    let mut out = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(batch_size.max(1)) {
        let pairs: Vec<(usize, usize)> = chunk.iter().map(|q| (q.0, q.1)).collect();
        let scores = scorer.score_batch(&pairs)?;
        if scores.shape() != [chunk.len(), n] {
            return Err(Error::Shape {
                op: "rank_queries",
                lhs: scores.shape().to_vec(),
                rhs: alloc::vec![chunk.len(), n],
            });
        }
        for (i, q) in chunk.iter().enumerate() {
            let row = &scores.data()[i * n..(i + 1) * n];
            if q.2 >= n {
                return Err(Error::Contract(format!("target {} outside {n} entities", q.2)));
            }
            out.push(RankResult {
                query: *q,
                rank: rank_ignoring(row, q.2, known.get(q.0, q.1)),
            });
        }
    }
    Ok(out)
}

/// Precomputed filter for repeated evaluation of one store.
#[derive(Clone, Debug)]
pub struct Evaluator {
    policy: FilterPolicy,
    known: KnownTails,
    num_relations: usize,
    pub batch_size: usize,
}

impl Evaluator {
    pub fn new(store: &TripleStore, policy: FilterPolicy) -> Self {
        Evaluator {
            policy,
            known: known_tails(store, policy.splits()),
            num_relations: store.num_relations(),
            batch_size: 256,
        }
    }

    pub fn policy(&self) -> FilterPolicy {
        self.policy
    }

    pub fn known(&self) -> &KnownTails {
        &self.known
    }

    pub fn queries(&self, triples: &[Triple]) -> Vec<(usize, usize, usize)> {
        queries_for(triples, self.num_relations)
    }

    pub fn ranks<S: Scorer + ?Sized>(&self, scorer: &S, triples: &[Triple]) -> Result<Vec<RankResult>> {
        rank_queries(scorer, &self.queries(triples), &self.known, self.batch_size)
    }

    pub fn evaluate<S: Scorer + ?Sized>(&self, scorer: &S, triples: &[Triple], ks: &[usize]) -> Result<Metrics> {
        if triples.is_empty() {
            return Err(Error::Contract("evaluation split is empty".into()));
        }
        let ranks: Vec<f64> = self.ranks(scorer, triples)?.iter().map(|r| r.rank).collect();
        Ok(Metrics::from_ranks(&ranks, ks, self.policy))
    }
}

/// Filtered metrics over both query directions of every triple in `split`.
pub fn evaluate_split<S: Scorer + ?Sized>(
    scorer: &S,
    store: &TripleStore,
    split: crate::data::Split,
    policy: FilterPolicy,
    ks: &[usize],
) -> Result<Metrics> {
    Evaluator::new(store, policy).evaluate(scorer, store.split(split), ks)
}

/// MRR of a ranker that orders `n` candidates uniformly at random: `(1/n) Σ_{k=1..n} 1/k`.
pub fn random_baseline_mrr(n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (1..=n).map(|k| 1.0 / k as f64).sum::<f64>() / n as f64
}
