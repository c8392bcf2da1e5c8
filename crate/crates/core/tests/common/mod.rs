#![allow(dead_code)]

use std::collections::BTreeMap;

use kbgsat_core::data::{AugmentedGraph, Split, Triple, TripleStore};
use kbgsat_core::eval::FilterPolicy;
use kbgsat_core::model::{Model, ParamStore, Scorer};
use kbgsat_core::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_RTOL: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely at `FD_RTOL * FD_FLOOR`.
pub const FD_FLOOR: f64 = 1e-5;

pub fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= FD_RTOL * analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Central finite differences of a scalar function of several tensors,
/// compared against the tape's gradients. `f` must return a scalar.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<(), String>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).map_err(|e| e.to_string())?;
    for (n, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
        for k in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[n].data_mut()[k] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[n].data_mut()[k] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            if !close(analytic[k], numeric) {
                return Err(format!(
                    "input {n} element {k}: analytic {} vs numeric {numeric}",
                    analytic[k]
                ));
            }
        }
    }
    Ok(())
}

/// Reduces a tensor-valued op to a scalar with fixed pseudo-random weights so
/// every output element contributes a distinct gradient.
pub fn weighted_sum(tape: &mut Tape, y: Var) -> Var {
    let n = tape.value(y).len();
    let shape = tape.shape(y).to_vec();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect();
    let wv = tape.constant(Tensor::new(shape, w).unwrap());
    let p = tape.mul(y, wv).unwrap();
    tape.sum(p)
}

/// Shrinks the embedding tables until every score in the batch is at most
/// `bound` in magnitude. The loss is BCE on probabilities, so near-saturated
/// sigmoids lose ~1e-16/(1-p) to cancellation and central differences become
/// noise-dominated; gradient checks are evaluated away from that regime.
pub fn moderate_scores(model: &mut Model, graph: &AugmentedGraph, pairs: &[(usize, usize)], bound: f64) {
    use kbgsat_core::model::Scorer;
    for _ in 0..50 {
        let max = {
            let emb = model.embed(graph).unwrap();
            let s = emb.score_batch(pairs).unwrap();
            s.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
        };
        if max <= bound {
            return;
        }
        for name in ["entity", "relation"] {
            model.params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v *= 0.8);
        }
    }
    panic!("could not bring scores below {bound}");
}

/// Finite-difference check of every parameter of a full model on one batch.
/// Returns the worst relative error seen and the number of scalars checked.
pub fn check_model_gradients(
    model: &Model,
    graph: &AugmentedGraph,
    pairs: &[(usize, usize)],
    labels: &Tensor,
) -> Result<(f64, usize), String> {
    let (_, grads) = model
        .loss_and_grads(graph, pairs, labels, false, &mut kbgsat_core::seeded_rng(0))
        .map_err(|e| e.to_string())?;
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (pi, name) in names.iter().enumerate() {
        let len = model.params.get(name).unwrap().len();
        let analytic = grads[pi].clone().unwrap_or_else(|| vec![0.0; len]);
        for k in 0..len {
            let mut plus = model.clone();
            plus.params.get_mut(name).unwrap().data_mut()[k] += FD_STEP;
            let mut minus = model.clone();
            minus.params.get_mut(name).unwrap().data_mut()[k] -= FD_STEP;
            let numeric = (plus.loss(graph, pairs, labels).unwrap() - minus.loss(graph, pairs, labels).unwrap())
                / (2.0 * FD_STEP);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
            checked += 1;
            if !close(a, numeric) {
                return Err(format!("{name}[{k}]: analytic {a} vs numeric {numeric}"));
            }
        }
    }
    Ok((worst, checked))
}

/// Six entities, two relations, every direction case represented: entity 5
/// is isolated, entity 4 only has in-edges, a node with two parallel edges.
pub fn toy_store() -> TripleStore {
    TripleStore::from_ids(
        6,
        2,
        vec![
            Triple::new(0, 0, 1),
            Triple::new(0, 1, 1),
            Triple::new(1, 0, 2),
            Triple::new(2, 1, 0),
            Triple::new(3, 0, 4),
            Triple::new(0, 0, 3),
            Triple::new(2, 0, 4),
        ],
        vec![Triple::new(1, 1, 3)],
        vec![Triple::new(3, 1, 2)],
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// Scalar-arithmetic reference encoder, written directly from the layer
// equations over adjacency lists. Shares nothing with the tape code paths.

pub fn mat(p: &ParamStore, name: &str) -> Vec<Vec<f64>> {
    let t = p.get(name).unwrap_or_else(|| panic!("missing {name}"));
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn matvec(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub fn cat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum OracleAttention {
    SelfAttention,
    GlobalVector,
}

pub struct OracleLayer {
    pub entity: Vec<Vec<f64>>,
    pub relation: Vec<Vec<f64>>,
    /// (direction 0=out 1=in, centre, neighbour, relation) → α
    pub alpha: BTreeMap<(usize, usize, usize, usize), f64>,
    pub out_stream: Vec<Vec<f64>>,
    pub in_stream: Vec<Vec<f64>>,
    pub loop_stream: Vec<Vec<f64>>,
}

pub fn oracle_layer(
    p: &ParamStore,
    layer: usize,
    graph: &AugmentedGraph,
    v: &[Vec<f64>],
    r: &[Vec<f64>],
    mode: OracleAttention,
    tanh: bool,
) -> OracleLayer {
    let name = |s: &str| format!("layer{layer}.{s}");
    let d = v[0].len();
    let w_loop = mat(p, &name("w_loop"));
    let w = mat(p, &name("w"));
    let w_r = mat(p, &name("w_rel"));
    let mut alpha = BTreeMap::new();
    let mut streams = [vec![vec![0.0; d]; v.len()], vec![vec![0.0; d]; v.len()]];
    for (di, (wm, wq)) in [("w_out", "wq_out"), ("w_in", "wq_in")].iter().enumerate() {
        let wdir = mat(p, &name(wm));
        for i in 0..v.len() {
            let adj = if di == 0 { graph.out_adj(i) } else { graph.in_adj(i) };
            if adj.is_empty() {
                continue;
            }
            let msgs: Vec<Vec<f64>> = adj.iter().map(|&(j, k)| matvec(&wdir, &cat(&[&v[j], &r[k]]))).collect();
            let logits: Vec<f64> = match mode {
                OracleAttention::SelfAttention => {
                    let q = matvec(&mat(p, &name(wq)), &v[i]);
                    msgs.iter().map(|m| dot(&q, m)).collect()
                }
                OracleAttention::GlobalVector => {
                    let a = p.get(&name("attn")).unwrap().data().to_vec();
                    adj.iter().map(|&(j, k)| dot(&a, &cat(&[&v[i], &r[k], &v[j]]))).collect()
                }
            };
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for (e, &(j, k)) in adj.iter().enumerate() {
                let a = logits[e].exp() / z;
                alpha.insert((di, i, j, k), a);
                for m in 0..d {
                    streams[di][i][m] += a * msgs[e][m];
                }
            }
        }
    }
    let loop_rel = graph.loop_relation();
    let loop_stream: Vec<Vec<f64>> = v.iter().map(|vi| matvec(&w_loop, &cat(&[vi, &r[loop_rel]]))).collect();
    let entity = (0..v.len())
        .map(|i| {
            matvec(&w, &cat(&[&streams[0][i], &streams[1][i], &loop_stream[i]]))
                .into_iter()
                .map(|x| if tanh { x.tanh() } else { x.max(0.0) })
                .collect()
        })
        .collect();
    let relation = r.iter().map(|rk| matvec(&w_r, rk)).collect();
    let [out_stream, in_stream] = streams;
    OracleLayer {
        entity,
        relation,
        alpha,
        out_stream,
        in_stream,
        loop_stream,
    }
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &Tensor) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (x, y) in row.iter().zip(b.row(i)) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Stub scorers and the brute-force ranker.

/// Scores from an explicit `(entity, relation) → row` table.
#[derive(Clone, Debug)]
pub struct Table {
    pub n: usize,
    pub rows: std::collections::BTreeMap<(usize, usize), Vec<f64>>,
}

impl Scorer for Table {
    fn num_entities(&self) -> usize {
        self.n
    }
    fn score_batch(&self, pairs: &[(usize, usize)]) -> kbgsat_core::Result<Tensor> {
        let mut data = Vec::new();
        for p in pairs {
            data.extend_from_slice(&self.rows[p]);
        }
        Tensor::new(vec![pairs.len(), self.n], data)
    }
}

impl Table {
    pub fn mapped(&self, f: impl Fn(f64) -> f64) -> Table {
        Table {
            n: self.n,
            rows: self
                .rows
                .iter()
                .map(|(k, v)| (*k, v.iter().map(|x| f(*x)).collect()))
                .collect(),
        }
    }
}

/// Brute force: for every query materialise the candidate list with the
/// filtered entities removed and count how many beat or tie the target.
pub fn brute_force(table: &Table, store: &TripleStore, split: Split, policy: FilterPolicy) -> Vec<f64> {
    let nr = store.num_relations();
    let filter_triples: Vec<Triple> = match policy {
        FilterPolicy::TrainOnly => store.train.clone(),
        FilterPolicy::Standard => store.train.iter().chain(&store.valid).chain(&store.test).copied().collect(),
    };
    let mut ranks = Vec::new();
    for t in store.split(split) {
        for (e, r, target, forward) in [(t.head, t.relation, t.tail, true), (t.tail, t.relation + nr, t.head, false)] {
            let row = &table.rows[&(e, r)];
            let excluded = |c: usize| {
                c != target
                    && filter_triples.iter().any(|f| {
                        if forward {
                            f.head == e && f.relation == r && f.tail == c
                        } else {
                            f.tail == e && f.relation + nr == r && f.head == c
                        }
                    })
            };
            let survivors: Vec<f64> = (0..table.n).filter(|c| !excluded(*c)).map(|c| row[c]).collect();
            let better = survivors.iter().filter(|s| **s > row[target]).count() as f64;
            let tied = survivors.iter().filter(|s| **s == row[target]).count() as f64 - 1.0;
            ranks.push(1.0 + better + tied / 2.0);
        }
    }
    ranks
}

/// Pseudo-random scores with few distinct values, so ties are common.
#[derive(Debug, Clone)]
pub struct Hashed {
    pub n: usize,
    pub seed: u64,
}

impl Scorer for Hashed {
    fn num_entities(&self) -> usize {
        self.n
    }
    fn score_batch(&self, pairs: &[(usize, usize)]) -> kbgsat_core::Result<Tensor> {
        let mut data = Vec::new();
        for &(e, r) in pairs {
            for t in 0..self.n {
                let mut h = self.seed ^ ((e as u64) << 40) ^ ((r as u64) << 20) ^ t as u64;
                h = h.wrapping_mul(0x9E37_79B9_7F4A_7C15);
                // Few distinct values so ties are exercised.
                data.push((h >> 61) as f64);
            }
        }
        Tensor::new(vec![pairs.len(), self.n], data)
    }
}
