//! Read-only evaluation fanned out over worker threads.
//!
//! Queries are split into contiguous chunks, one per worker, and the ranks are
//! concatenated in query order before reduction. Every score row depends only
//! on its own condition pair, so the result is bit-identical for any worker
//! count.

use kbgsat_core::data::Triple;
use kbgsat_core::eval::{rank_queries, Evaluator, Metrics, RankResult};
use kbgsat_core::model::Scorer;
use kbgsat_core::Result;

pub fn ranks_parallel<S: Scorer + Sync + ?Sized>(
    evaluator: &Evaluator,
    scorer: &S,
    triples: &[Triple],
    workers: usize,
) -> Result<Vec<RankResult>> {
    let queries = evaluator.queries(triples);
    let workers = workers.clamp(1, queries.len().max(1));
    if workers == 1 {
        return rank_queries(scorer, &queries, evaluator.known(), evaluator.batch_size);
    }
    let chunk = queries.len().div_ceil(workers);
    let parts: Vec<Result<Vec<RankResult>>> = std::thread::scope(|s| {
        let handles: Vec<_> = queries
            .chunks(chunk)
            .map(|q| s.spawn(move || rank_queries(scorer, q, evaluator.known(), evaluator.batch_size)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(queries.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// [`Evaluator::evaluate`] using `workers` threads.
pub fn evaluate_parallel<S: Scorer + Sync + ?Sized>(
    evaluator: &Evaluator,
    scorer: &S,
    triples: &[Triple],
    ks: &[usize],
    workers: usize,
) -> Result<Metrics> {
    if triples.is_empty() {
        // Same error as the sequential path.
        return evaluator.evaluate(scorer, triples, ks);
    }
    let ranks: Vec<f64> = ranks_parallel(evaluator, scorer, triples, workers)?
        .iter()
        .map(|r| r.rank)
        .collect();
    Ok(Metrics::from_ranks(&ranks, ks, evaluator.policy()))
}
