//! Relational graph self-attention encoder.
//!
//! Each layer aggregates three message streams per entity: out-edges, in-edges
//! and a self-loop. Out/in messages are `W_dir · [v_neighbor ; v_relation]`,
//! weighted by attention coefficients normalised over the centre entity's
//! edges in that direction. The streams are concatenated, projected by `W` and
//! passed through the activation. Relations are updated by a shared `W_r`.
//! With two layers the final entity embedding is the sum of both layer outputs.
//!
//! Attention comes in two flavours:
//!
//! * [`AttentionMode::SelfAttention`]: the logit of edge `(i, j, k)` is the dot
//!   product of the projected centre `W'_dir · v_i` with the edge's own message
//!   `W_dir · [v_j ; v_k]`. No global attention vector.
//! * [`AttentionMode::GlobalVector`]: logit `aᵀ [v_i ; v_k ; v_j]` with one
//!   learned vector `a` per layer. Kept for ablations.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::data::{AugmentedGraph, Direction, EdgeIndex};
use crate::model::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    SelfAttention,
    GlobalVector,
}

impl AttentionMode {
    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::SelfAttention => "kbgsat",
            AttentionMode::GlobalVector => "kbgat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "kbgsat" => Some(AttentionMode::SelfAttention),
            "kbgat" => Some(AttentionMode::GlobalVector),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub attention: AttentionMode,
    pub activation: Activation,
    /// Applied to attention coefficients and to each layer's entity output.
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if !(1..=2).contains(&self.layers) {
            return Err(Error::Config(format!("layers must be 1 or 2, got {}", self.layers)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

fn pname(layer: usize, name: &str) -> String {
    format!("layer{layer}.{name}")
}

/// Zero-mean normal with variance `2 / fan_in`.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = libm::sqrt(2.0 / fan_in.max(1) as f64);
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Adds the embedding tables and every layer's matrices to `store`.
pub fn init_params(
    store: &mut ParamStore,
    num_entities: usize,
    relation_rows: usize,
    cfg: &EncoderConfig,
    rng: &mut Rng,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.dim;
    store.insert("entity", he_normal(&[num_entities, d], d, rng))?;
    store.insert("relation", he_normal(&[relation_rows, d], d, rng))?;
    for l in 0..cfg.layers {
        store.insert(&pname(l, "w_out"), he_normal(&[d, 2 * d], 2 * d, rng))?;
        store.insert(&pname(l, "w_in"), he_normal(&[d, 2 * d], 2 * d, rng))?;
        store.insert(&pname(l, "w_loop"), he_normal(&[d, 2 * d], 2 * d, rng))?;
        store.insert(&pname(l, "w"), he_normal(&[d, 3 * d], 3 * d, rng))?;
        match cfg.attention {
            AttentionMode::SelfAttention => {
                store.insert(&pname(l, "wq_out"), he_normal(&[d, d], d, rng))?;
                store.insert(&pname(l, "wq_in"), he_normal(&[d, d], d, rng))?;
            }
            AttentionMode::GlobalVector => {
                store.insert(&pname(l, "attn"), he_normal(&[3 * d], 3 * d, rng))?;
            }
        }
        store.insert(&pname(l, "w_rel"), he_normal(&[d, d], d, rng))?;
    }
    Ok(())
}

/// One layer's parameters bound to a tape. Matrices are stored `out × in` and
/// bound transposed, so row-major activations multiply on the left.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub w_out: Var,
    pub w_in: Var,
    pub w_loop: Var,
    pub w: Var,
    pub wq_out: Option<Var>,
    pub wq_in: Option<Var>,
    pub attn: Option<Var>,
    pub w_rel: Var,
}

impl LayerVars {
    pub fn bind(tape: &mut Tape, bound: &Bound<'_>, layer: usize) -> Result<Self> {
        let mut t = |name: &str| -> Result<Var> {
            let v = bound.get(&pname(layer, name))?;
            tape.transpose(v)
        };
        let w_out = t("w_out")?;
        let w_in = t("w_in")?;
        let w_loop = t("w_loop")?;
        let w = t("w")?;
        let w_rel = t("w_rel")?;
        let (wq_out, wq_in) = match (bound.try_get(&pname(layer, "wq_out")), bound.try_get(&pname(layer, "wq_in"))) {
            (Some(o), Some(i)) => (Some(tape.transpose(o)?), Some(tape.transpose(i)?)),
            _ => (None, None),
        };
        let attn = match bound.try_get(&pname(layer, "attn")) {
            Some(a) => {
                let n = tape.shape(a)[0];
                Some(tape.reshape(a, &[n, 1])?)
            }
            None => None,
        };
        Ok(LayerVars {
            w_out,
            w_in,
            w_loop,
            w,
            wq_out,
            wq_in,
            attn,
            w_rel,
        })
    }

    fn message_weight(&self, dir: Direction) -> Var {
        match dir {
            Direction::Out => self.w_out,
            Direction::In => self.w_in,
        }
    }

    fn query_weight(&self, dir: Direction) -> Option<Var> {
        match dir {
            Direction::Out => self.wq_out,
            Direction::In => self.wq_in,
        }
    }
}

/// Per-edge messages and their normalised coefficients for one direction.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    /// `n_edges × d`: `W_dir · [v_neighbor ; v_relation]`.
    pub messages: Var,
    /// `n_edges`: coefficients summing to 1 over each centre's edges.
    pub alpha: Var,
}

fn edge_messages(tape: &mut Tape, edges: &EdgeIndex, entity: Var, relation: Var, w_dir_t: Var) -> Result<Var> {
    let nb = tape.gather_rows(entity, &edges.neighbor)?;
    let rel = tape.gather_rows(relation, &edges.relation)?;
    let x = tape.concat_cols(&[nb, rel])?;
    tape.matmul(x, w_dir_t)
}

/// Messages and self-attention coefficients for one direction.
///
/// In global-vector mode the coefficients come from [`kbgat_attention`] and the
/// messages are unchanged.
pub fn attention_coefficients(
    tape: &mut Tape,
    edges: &EdgeIndex,
    entity: Var,
    relation: Var,
    vars: &LayerVars,
    dir: Direction,
) -> Result<Attention> {
    let messages = edge_messages(tape, edges, entity, relation, vars.message_weight(dir))?;
    let alpha = match (vars.query_weight(dir), vars.attn) {
        (Some(wq), _) => {
            let q_all = tape.matmul(entity, wq)?;
            let q = tape.gather_rows(q_all, &edges.center)?;
            let prod = tape.mul(q, messages)?;
            let logits = tape.sum_last_axis(prod)?;
            tape.segment_softmax(logits, &edges.center)?
        }
        (None, Some(a)) => kbgat_attention(tape, edges, entity, relation, a)?,
        (None, None) => {
            return Err(Error::Contract("layer has no attention parameters".into()));
        }
    };
    Ok(Attention { messages, alpha })
}

/// Global-vector attention: softmax over `aᵀ [v_center ; v_relation ; v_neighbor]`.
/// `a` is a `3d × 1` column.
pub fn kbgat_attention(tape: &mut Tape, edges: &EdgeIndex, entity: Var, relation: Var, a: Var) -> Result<Var> {
    let c = tape.gather_rows(entity, &edges.center)?;
    let r = tape.gather_rows(relation, &edges.relation)?;
    let n = tape.gather_rows(entity, &edges.neighbor)?;
    let x = tape.concat_cols(&[c, r, n])?;
    let logits = tape.matmul(x, a)?;
    let flat = tape.reshape(logits, &[edges.len()])?;
    tape.segment_softmax(flat, &edges.center)
}

/// `Σ α · message` per centre entity; entities without edges get zeros.
pub fn aggregate_direction(
    tape: &mut Tape,
    edges: &EdgeIndex,
    attention: &Attention,
    num_entities: usize,
) -> Result<Var> {
    let weighted = tape.scale_rows(attention.messages, attention.alpha)?;
    tape.scatter_add_rows(weighted, &edges.center, num_entities)
}

/// `W_loop · [v_i ; v_loop]` for every entity.
pub fn self_loop(tape: &mut Tape, entity: Var, relation: Var, loop_relation: usize, w_loop_t: Var) -> Result<Var> {
    let n = tape.shape(entity)[0];
    let lr = tape.gather_rows(relation, &vec![loop_relation; n])?;
    let x = tape.concat_cols(&[entity, lr])?;
    tape.matmul(x, w_loop_t)
}

#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    pub entity: Var,
    pub relation: Var,
    pub alpha_out: Var,
    pub alpha_in: Var,
}

pub fn layer_forward(
    tape: &mut Tape,
    graph: &AugmentedGraph,
    entity: Var,
    relation: Var,
    vars: &LayerVars,
    cfg: &EncoderConfig,
    rng: &mut Rng,
) -> Result<LayerOutput> {
    let ne = graph.num_entities();
    let mut streams = [entity; 2];
    let mut alphas = [entity; 2];
    for (slot, dir) in [Direction::Out, Direction::In].into_iter().enumerate() {
        let edges = graph.edges(dir);
        let mut att = attention_coefficients(tape, edges, entity, relation, vars, dir)?;
        alphas[slot] = att.alpha;
        att.alpha = tape.dropout(att.alpha, cfg.dropout, rng)?;
        streams[slot] = aggregate_direction(tape, edges, &att, ne)?;
    }
    let lp = self_loop(tape, entity, relation, graph.loop_relation(), vars.w_loop)?;
    let cat = tape.concat_cols(&[streams[0], streams[1], lp])?;
    let pre = tape.matmul(cat, vars.w)?;
    let act = match cfg.activation {
        Activation::Tanh => tape.tanh(pre),
        Activation::Relu => tape.relu(pre),
    };
    let out = tape.dropout(act, cfg.dropout, rng)?;
    let rel_out = tape.matmul(relation, vars.w_rel)?;
    Ok(LayerOutput {
        entity: out,
        relation: rel_out,
        alpha_out: alphas[0],
        alpha_in: alphas[1],
    })
}

#[derive(Clone, Debug)]
pub struct Encoded {
    /// Sum of every layer's entity output.
    pub entity: Var,
    /// Last layer's relation output.
    pub relation: Var,
    pub layers: Vec<LayerOutput>,
}

pub fn encode(
    tape: &mut Tape,
    graph: &AugmentedGraph,
    bound: &Bound<'_>,
    cfg: &EncoderConfig,
    rng: &mut Rng,
) -> Result<Encoded> {
    let mut entity = bound.get("entity")?;
    let mut relation = bound.get("relation")?;
    if tape.shape(entity) != [graph.num_entities(), cfg.dim]
        || tape.shape(relation) != [graph.relation_rows(), cfg.dim]
    {
        return Err(Error::Shape {
            op: "encode",
            lhs: tape.shape(entity).to_vec(),
            rhs: vec![graph.num_entities(), graph.relation_rows(), cfg.dim],
        });
    }
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut skip: Option<Var> = None;
    for l in 0..cfg.layers {
        let vars = LayerVars::bind(tape, bound, l)?;
        let out = layer_forward(tape, graph, entity, relation, &vars, cfg, rng)?;
        skip = Some(match skip {
            None => out.entity,
            Some(s) => tape.add(s, out.entity)?,
        });
        entity = out.entity;
        relation = out.relation;
        layers.push(out);
    }
    Ok(Encoded {
        entity: skip.unwrap_or(entity),
        relation,
        layers,
    })
}
