//! Named parameters and the full encoder + decoder model.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::data::AugmentedGraph;
use crate::decoder::{self, DecoderKind, PROB_EPS};
use crate::encoder::{self, EncoderConfig};
use crate::tensor::{Tape, Tensor, Var};
use crate::{seeded_rng, Error, Result, Rng};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.index_of(name).is_some() {
            return Err(Error::Contract(format!("parameter `{name}` defined twice")));
        }
        self.entries.push((name.to_string(), value));
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Records every parameter as a leaf of `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape, requires_grad: bool) -> Bound<'a> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect();
        Bound { store: self, vars }
    }
}

/// Parameters of a [`ParamStore`] recorded on a tape.
#[derive(Debug)]
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.store.index_of(name).map(|i| self.vars[i])
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.try_get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    /// Variables in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_entities: usize,
    /// Original relation count `R` (inverse and self-loop rows are added).
    pub num_relations: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderKind,
}

impl ModelConfig {
    pub fn relation_rows(&self) -> usize {
        2 * self.num_relations + 1
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate(self.encoder.dim)
    }
}

/// Scores condition pairs against all entities.
pub trait Scorer {
    fn num_entities(&self) -> usize;

    /// Row-major `pairs.len() × num_entities()` scores.
    fn score_batch(&self, pairs: &[(usize, usize)]) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// He-initialised model; the same seed always yields the same parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamStore::default();
        encoder::init_params(
            &mut params,
            config.num_entities,
            config.relation_rows(),
            &config.encoder,
            &mut rng,
        )?;
        decoder::init_params(&mut params, &config.decoder, config.encoder.dim, &mut rng)?;
        Ok(Model { config, params })
    }

    fn check_graph(&self, graph: &AugmentedGraph) -> Result<()> {
        if graph.num_entities() != self.config.num_entities || graph.num_relations() != self.config.num_relations {
            return Err(Error::Shape {
                op: "model/graph",
                lhs: alloc::vec![self.config.num_entities, self.config.num_relations],
                rhs: alloc::vec![graph.num_entities(), graph.num_relations()],
            });
        }
        Ok(())
    }

    fn forward_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound<'_>,
        graph: &AugmentedGraph,
        pairs: &[(usize, usize)],
        labels: &Tensor,
        rng: &mut Rng,
    ) -> Result<Var> {
        self.check_graph(graph)?;
        let enc = encoder::encode(tape, graph, bound, &self.config.encoder, rng)?;
        let ents: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let rels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let h = tape.gather_rows(enc.entity, &ents)?;
        let r = tape.gather_rows(enc.relation, &rels)?;
        let s = decoder::score(tape, &self.config.decoder, bound, h, r, enc.entity)?;
        let p = tape.sigmoid(s);
        tape.bce(p, labels, PROB_EPS)
    }

    /// Evaluation-mode loss (no dropout).
    pub fn loss(&self, graph: &AugmentedGraph, pairs: &[(usize, usize)], labels: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let l = self.forward_loss(&mut tape, &bound, graph, pairs, labels, &mut seeded_rng(0))?;
        Ok(tape.value(l).data()[0])
    }

    /// Loss and per-parameter gradients (store order). `training` enables dropout.
    pub fn loss_and_grads(
        &self,
        graph: &AugmentedGraph,
        pairs: &[(usize, usize)],
        labels: &Tensor,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut tape = if training { Tape::training() } else { Tape::new() };
        let bound = self.params.bind(&mut tape, true);
        let l = self.forward_loss(&mut tape, &bound, graph, pairs, labels, rng)?;
        let loss = tape.value(l).data()[0];
        let mut grads = tape.backward(l)?;
        let out = bound.vars().iter().map(|v| grads.take(*v)).collect();
        Ok((loss, out))
    }

    /// Final entity and relation embeddings in evaluation mode.
    pub fn embed(&self, graph: &AugmentedGraph) -> Result<Embeddings<'_>> {
        self.check_graph(graph)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let enc = encoder::encode(&mut tape, graph, &bound, &self.config.encoder, &mut seeded_rng(0))?;
        Ok(Embeddings {
            model: self,
            entity: tape.value(enc.entity).clone(),
            relation: tape.value(enc.relation).clone(),
        })
    }
}

/// Encoded embeddings together with the decoder that scores them.
#[derive(Clone, Debug)]
pub struct Embeddings<'m> {
    model: &'m Model,
    pub entity: Tensor,
    pub relation: Tensor,
}

impl Embeddings<'_> {
    pub fn score_rows(&self, pairs: &[(usize, usize)]) -> Result<Vec<decoder::ScoreRow>> {
        let n = self.num_entities();
        let s = self.score_batch(pairs)?;
        Ok(pairs
            .iter()
            .enumerate()
            .map(|(i, q)| decoder::ScoreRow {
                query: *q,
                scores: s.data()[i * n..(i + 1) * n].to_vec(),
            })
            .collect())
    }
}

impl Scorer for Embeddings<'_> {
    fn num_entities(&self) -> usize {
        self.entity.rows()
    }

    fn score_batch(&self, pairs: &[(usize, usize)]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape, false);
        let e = tape.constant(self.entity.clone());
        let r = tape.constant(self.relation.clone());
        let ents: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let rels: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let h = tape.gather_rows(e, &ents)?;
        let rr = tape.gather_rows(r, &rels)?;
        let s = decoder::score(&mut tape, &self.model.config.decoder, &bound, h, rr, e)?;
        Ok(tape.value(s).clone())
    }
}
