//! The tape encoder checked against a plain scalar-loop implementation, plus
//! structural invariants: normalisation, locality and relabelling invariance.

mod common;

use common::*;
use kbgsat_core::data::{augment, AugmentedGraph, Direction, Triple, TripleStore};
use kbgsat_core::decoder::DecoderKind;
use kbgsat_core::encoder::{encode, Activation, AttentionMode, EncoderConfig};
use kbgsat_core::model::{Model, ModelConfig, ParamStore};
use kbgsat_core::tensor::Tape;

fn model(store: &TripleStore, dim: usize, layers: usize, attention: AttentionMode, activation: Activation) -> Model {
    Model::new(
        ModelConfig {
            num_entities: store.num_entities(),
            num_relations: store.num_relations(),
            encoder: EncoderConfig {
                dim,
                layers,
                attention,
                activation,
                dropout: 0.0,
            },
            decoder: DecoderKind::DistMult,
        },
        11,
    )
    .unwrap()
}

struct TapeRun {
    entity: kbgsat_core::tensor::Tensor,
    relation: kbgsat_core::tensor::Tensor,
    layer_entities: Vec<kbgsat_core::tensor::Tensor>,
    /// Per layer: (direction, centre, neighbour, relation) → α.
    alphas: Vec<Vec<((usize, usize, usize, usize), f64)>>,
}

fn run_tape(m: &Model, graph: &AugmentedGraph) -> TapeRun {
    let mut tape = Tape::new();
    let bound = m.params.bind(&mut tape, false);
    let enc = encode(&mut tape, graph, &bound, &m.config.encoder, &mut kbgsat_core::seeded_rng(0)).unwrap();
    let mut alphas = Vec::new();
    for layer in &enc.layers {
        let mut list = Vec::new();
        for (di, (dir, a)) in [(Direction::Out, layer.alpha_out), (Direction::In, layer.alpha_in)].into_iter().enumerate() {
            let e = graph.edges(dir);
            for (k, v) in tape.value(a).data().iter().enumerate() {
                list.push(((di, e.center[k], e.neighbor[k], e.relation[k]), *v));
            }
        }
        alphas.push(list);
    }
    TapeRun {
        entity: tape.value(enc.entity).clone(),
        relation: tape.value(enc.relation).clone(),
        layer_entities: enc.layers.iter().map(|l| tape.value(l.entity).clone()).collect(),
        alphas,
    }
}

fn run_oracle(m: &Model, graph: &AugmentedGraph) -> Vec<OracleLayer> {
    let mode = match m.config.encoder.attention {
        AttentionMode::SelfAttention => OracleAttention::SelfAttention,
        AttentionMode::GlobalVector => OracleAttention::GlobalVector,
    };
    let tanh = m.config.encoder.activation == Activation::Tanh;
    let mut v = mat(&m.params, "entity");
    let mut r = mat(&m.params, "relation");
    let mut out = Vec::new();
    for l in 0..m.config.encoder.layers {
        let layer = oracle_layer(&m.params, l, graph, &v, &r, mode, tanh);
        v = layer.entity.clone();
        r = layer.relation.clone();
        out.push(layer);
    }
    out
}

fn compare(store: &TripleStore, layers: usize, attention: AttentionMode, activation: Activation) {
    let m = model(store, 4, layers, attention, activation);
    let g = augment(store);
    let tape = run_tape(&m, &g);
    let oracle = run_oracle(&m, &g);
    for (l, layer) in oracle.iter().enumerate() {
        assert!(max_abs_diff(&layer.entity, &tape.layer_entities[l]) < 1e-10, "layer {l} entity");
        assert_eq!(tape.alphas[l].len(), layer.alpha.len(), "edge count layer {l}");
        for (key, a) in &tape.alphas[l] {
            let o = layer.alpha[key];
            assert!((a - o).abs() < 1e-10, "alpha {key:?}: {a} vs {o}");
        }
    }
    let mut skip = oracle[0].entity.clone();
    for layer in &oracle[1..] {
        for (row, add) in skip.iter_mut().zip(&layer.entity) {
            row.iter_mut().zip(add).for_each(|(a, b)| *a += b);
        }
    }
    assert!(max_abs_diff(&skip, &tape.entity) < 1e-10, "skip sum");
    assert!(max_abs_diff(&oracle.last().unwrap().relation, &tape.relation) < 1e-10, "relations");
}

#[test]
fn self_attention_matches_oracle() {
    for layers in [1, 2] {
        compare(&toy_store(), layers, AttentionMode::SelfAttention, Activation::Tanh);
    }
}

#[test]
fn global_vector_attention_matches_oracle() {
    for layers in [1, 2] {
        compare(&toy_store(), layers, AttentionMode::GlobalVector, Activation::Tanh);
    }
}

#[test]
fn relu_activation_matches_oracle() {
    compare(&toy_store(), 2, AttentionMode::SelfAttention, Activation::Relu);
}

#[test]
fn streams_of_isolated_entity() {
    // Entity 5 has no edges: both attention streams are zero and only the
    // self-loop reaches the output.
    let store = toy_store();
    let m = model(&store, 4, 1, AttentionMode::SelfAttention, Activation::Tanh);
    let g = augment(&store);
    let o = &run_oracle(&m, &g)[0];
    assert!(o.out_stream[5].iter().chain(&o.in_stream[5]).all(|v| *v == 0.0));
    assert!(o.in_stream[4].iter().any(|v| *v != 0.0));
    assert!(o.out_stream[4].iter().all(|v| *v == 0.0));
    assert!(o.loop_stream[5].iter().any(|v| *v != 0.0));
}

#[test]
fn coefficients_are_normalised() {
    let store = toy_store();
    for attention in [AttentionMode::SelfAttention, AttentionMode::GlobalVector] {
        let m = model(&store, 4, 2, attention, Activation::Tanh);
        let g = augment(&store);
        let run = run_tape(&m, &g);
        for layer in &run.alphas {
            let mut sums = std::collections::BTreeMap::new();
            for ((d, c, _, _), a) in layer {
                assert!(*a > 0.0 && *a <= 1.0);
                *sums.entry((*d, *c)).or_insert(0.0) += a;
            }
            for (key, s) in sums {
                assert!((s - 1.0).abs() <= 1e-6, "{key:?} sums to {s}");
            }
        }
    }
}

#[test]
fn single_layer_is_local() {
    let store = toy_store();
    let g = augment(&store);
    let m = model(&store, 4, 1, AttentionMode::SelfAttention, Activation::Tanh);
    let base = run_tape(&m, &g).entity;
    let mut moved = m.clone();
    moved.params.get_mut("entity").unwrap().data_mut()[3 * 4] += 0.5;
    let after = run_tape(&moved, &g).entity;
    // Entity 3's one-hop neighbourhood is {0, 4}.
    for e in 0..6 {
        let changed = base.row(e) != after.row(e);
        assert_eq!(changed, [0, 3, 4].contains(&e), "entity {e}");
    }
}

#[test]
fn two_layers_reach_two_hops() {
    let store = toy_store();
    let g = augment(&store);
    let m = model(&store, 4, 2, AttentionMode::SelfAttention, Activation::Tanh);
    let base = run_tape(&m, &g).entity;
    let mut moved = m.clone();
    moved.params.get_mut("entity").unwrap().data_mut()[4 * 4] += 0.5;
    let after = run_tape(&moved, &g).entity;
    // 4 ← 3 ← 0 and 4 ← 2: two hops reach {0, 2, 3, 4} and 1 (via 2 or 0).
    assert_ne!(base.row(0), after.row(0));
    assert_eq!(base.row(5), after.row(5), "isolated entity is unaffected");
}

fn permute_store(store: &TripleStore, pi: &[usize]) -> TripleStore {
    let map = |ts: &[Triple]| -> Vec<Triple> {
        ts.iter().map(|t| Triple::new(pi[t.head], t.relation, pi[t.tail])).collect()
    };
    TripleStore::from_ids(
        store.num_entities(),
        store.num_relations(),
        map(&store.train),
        map(&store.valid),
        map(&store.test),
    )
    .unwrap()
}

#[test]
fn relabelling_entities_permutes_outputs() {
    let store = toy_store();
    let pi = [4, 2, 5, 0, 3, 1];
    let permuted = permute_store(&store, &pi);
    for attention in [AttentionMode::SelfAttention, AttentionMode::GlobalVector] {
        let m = model(&store, 4, 2, attention, Activation::Tanh);
        let mut pm = m.clone();
        let src = m.params.get("entity").unwrap().clone();
        let dst = pm.params.get_mut("entity").unwrap();
        for e in 0..6 {
            dst.data_mut()[pi[e] * 4..pi[e] * 4 + 4].copy_from_slice(src.row(e));
        }
        let a = run_tape(&m, &augment(&store)).entity;
        let b = run_tape(&pm, &augment(&permuted)).entity;
        for e in 0..6 {
            for (x, y) in a.row(e).iter().zip(b.row(pi[e])) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn triple_order_does_not_change_output() {
    let store = toy_store();
    let mut reversed = store.train.clone();
    reversed.reverse();
    let shuffled = TripleStore::from_ids(6, 2, reversed, store.valid.clone(), store.test.clone()).unwrap();
    let m = model(&store, 4, 2, AttentionMode::SelfAttention, Activation::Tanh);
    assert_eq!(run_tape(&m, &augment(&store)).entity, run_tape(&m, &augment(&shuffled)).entity);
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let store = toy_store();
    let g = augment(&store);
    let pairs = [(0, 0), (4, 2), (5, 1)];
    let labels = kbgsat_core::tensor::Tensor::new(
        vec![3, 6],
        vec![
            0., 1., 0., 1., 0., 0., //
            0., 0., 1., 1., 0., 0., //
            0., 0., 0., 0., 0., 1.,
        ],
    )
    .unwrap();
    for attention in [AttentionMode::SelfAttention, AttentionMode::GlobalVector] {
        for layers in [1, 2] {
            let mut m = model(&store, 3, layers, attention, Activation::Tanh);
            moderate_scores(&mut m, &g, &pairs, 4.0);
            let (_, n) = check_model_gradients(&m, &g, &pairs, &labels).unwrap();
            assert_eq!(n, m.params.num_scalars());
        }
    }
}

#[test]
fn param_names_follow_layout() {
    let store = toy_store();
    let m = model(&store, 4, 2, AttentionMode::GlobalVector, Activation::Tanh);
    let names: Vec<&str> = m.params.iter().map(|(n, _)| n).collect();
    assert!(names.contains(&"layer1.attn"));
    assert!(!names.contains(&"layer0.wq_out"));
    assert_eq!(m.params.get("layer0.attn").unwrap().shape(), &[12]);
    let _unused: &ParamStore = &m.params;
}
