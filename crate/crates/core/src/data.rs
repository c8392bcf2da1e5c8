//! Triples in id space, inverse-relation augmentation, and known-tail indexes.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub const fn new(head: usize, relation: usize, tail: usize) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(name: &str) -> Option<Split> {
        match name {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// A subset of {train, valid, test}.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SplitSet {
    pub train: bool,
    pub valid: bool,
    pub test: bool,
}

impl SplitSet {
    pub const NONE: SplitSet = SplitSet {
        train: false,
        valid: false,
        test: false,
    };
    pub const TRAIN: SplitSet = SplitSet {
        train: true,
        valid: false,
        test: false,
    };
    pub const ALL: SplitSet = SplitSet {
        train: true,
        valid: true,
        test: true,
    };
    pub const HELD_OUT: SplitSet = SplitSet {
        train: false,
        valid: true,
        test: true,
    };

    pub fn contains(self, split: Split) -> bool {
        match split {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::Test => self.test,
        }
    }

    pub fn with(mut self, split: Split) -> Self {
        match split {
            Split::Train => self.train = true,
            Split::Valid => self.valid = true,
            Split::Test => self.test = true,
        }
        self
    }

    pub fn is_empty(self) -> bool {
        !(self.train || self.valid || self.test)
    }

    pub fn iter(self) -> impl Iterator<Item = Split> {
        Split::ALL.into_iter().filter(move |s| self.contains(*s))
    }
}

/// Dense surface-string ↔ id mapping; ids follow insertion order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dictionary {
    names: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl Dictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id for `name`, inserting it if absent. The flag is true on insertion.
    pub fn intern(&mut self, name: &str) -> (usize, bool) {
        if let Some(&id) = self.ids.get(name) {
            return (id, false);
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        (id, true)
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// `id<TAB>name` lines in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, n) in self.names.iter().enumerate() {
            out.push_str(&format!("{i}\t{n}\n"));
        }
        out
    }

    /// Dictionary keys closest to `query` by edit distance, best first.
    pub fn nearest(&self, query: &str, k: usize) -> Vec<&str> {
        let mut scored: Vec<(usize, &str)> = self
            .names
            .iter()
            .map(|n| (edit_distance(query, n), n.as_str()))
            .collect();
        scored.sort();
        scored.into_iter().take(k).map(|(_, n)| n).collect()
    }
}

fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != *cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Symbols seen for the first time outside the training split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub entities: usize,
    pub relations: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub unseen_entities: Vec<(Split, String)>,
    pub unseen_relations: Vec<(Split, String)>,
}

impl LoadReport {
    pub fn is_clean(&self) -> bool {
        self.unseen_entities.is_empty() && self.unseen_relations.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripleStore {
    pub entities: Dictionary,
    pub relations: Dictionary,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
}

impl TripleStore {
    /// Parses the three splits. Ids are assigned by first appearance,
    /// scanning train, then valid, then test.
    pub fn parse(train: &str, valid: &str, test: &str) -> Result<(TripleStore, LoadReport)> {
        let mut store = TripleStore::default();
        let mut report = LoadReport::default();
        for (split, text) in [(Split::Train, train), (Split::Valid, valid), (Split::Test, test)] {
            let triples = store.parse_split(split, text, &mut report)?;
            *store.split_mut(split) = triples;
        }
        report.entities = store.num_entities();
        report.relations = store.num_relations();
        report.train = store.train.len();
        report.valid = store.valid.len();
        report.test = store.test.len();
        Ok((store, report))
    }

    fn parse_split(&mut self, split: Split, text: &str, report: &mut LoadReport) -> Result<Vec<Triple>> {
        let mut out = Vec::new();
        let mut first_line: BTreeMap<Triple, usize> = BTreeMap::new();
        let mut duplicates = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    split: split.name(),
                    line: i + 1,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let (h, new_h) = self.entities.intern(fields[0]);
            let (r, new_r) = self.relations.intern(fields[1]);
            let (t, new_t) = self.entities.intern(fields[2]);
            if split != Split::Train {
                for (new, name) in [(new_h, fields[0]), (new_t, fields[2])] {
                    if new {
                        report.unseen_entities.push((split, name.to_string()));
                    }
                }
                if new_r {
                    report.unseen_relations.push((split, fields[1].to_string()));
                }
            }
            let triple = Triple::new(h, r, t);
            if let Some(&first) = first_line.get(&triple) {
                duplicates.push(first);
                duplicates.push(i + 1);
            } else {
                first_line.insert(triple, i + 1);
                out.push(triple);
            }
        }
        if !duplicates.is_empty() {
            duplicates.sort_unstable();
            duplicates.dedup();
            return Err(Error::Duplicate {
                split: split.name(),
                lines: duplicates,
            });
        }
        Ok(out)
    }

    /// Builds a store from id-space triples with generated names `e{i}` / `r{i}`.
    pub fn from_ids(
        num_entities: usize,
        num_relations: usize,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Result<TripleStore> {
        let mut store = TripleStore::default();
        for i in 0..num_entities {
            store.entities.intern(&format!("e{i}"));
        }
        for i in 0..num_relations {
            store.relations.intern(&format!("r{i}"));
        }
        store.train = train;
        store.valid = valid;
        store.test = test;
        store.validate()?;
        Ok(store)
    }

    /// Checks id ranges and per-split uniqueness.
    pub fn validate(&self) -> Result<()> {
        for split in Split::ALL {
            let mut seen = BTreeSet::new();
            let mut dups = Vec::new();
            for (i, t) in self.split(split).iter().enumerate() {
                if t.head >= self.num_entities()
                    || t.tail >= self.num_entities()
                    || t.relation >= self.num_relations()
                {
                    return Err(Error::Contract(format!(
                        "{} triple {i} ({t:?}) has an id out of range",
                        split.name()
                    )));
                }
                if !seen.insert(*t) {
                    dups.push(i + 1);
                }
            }
            if !dups.is_empty() {
                return Err(Error::Duplicate {
                    split: split.name(),
                    lines: dups,
                });
            }
        }
        Ok(())
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Triple> {
        match split {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    /// `head<TAB>relation<TAB>tail` lines using surface strings.
    pub fn triples_to_tsv(&self, triples: &[Triple]) -> String {
        let mut out = String::new();
        for t in triples {
            let h = self.entities.name(t.head).unwrap_or("?");
            let r = self.relations.name(t.relation).unwrap_or("?");
            let tl = self.entities.name(t.tail).unwrap_or("?");
            out.push_str(h);
            out.push('\t');
            out.push_str(r);
            out.push('\t');
            out.push_str(tl);
            out.push('\n');
        }
        out
    }

    pub fn split_to_tsv(&self, split: Split) -> String {
        self.triples_to_tsv(self.split(split))
    }

    /// Copy whose training split is `train ∪ extra`, keeping dictionaries and held-out splits.
    pub fn with_extra_train(&self, extra: &[Triple]) -> TripleStore {
        let mut merged = self.clone();
        let mut seen: BTreeSet<Triple> = merged.train.iter().copied().collect();
        for t in extra {
            if seen.insert(*t) {
                merged.train.push(*t);
            }
        }
        merged
    }
}

/// Message-passing direction relative to the centre entity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Out,
    In,
}

/// Flattened edges of one direction, sorted by (centre, neighbour, relation).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EdgeIndex {
    pub center: Vec<usize>,
    pub neighbor: Vec<usize>,
    pub relation: Vec<usize>,
}

impl EdgeIndex {
    fn from_adjacency(adj: &[Vec<(usize, usize)>]) -> Self {
        let mut edges: Vec<(usize, usize, usize)> = adj
            .iter()
            .enumerate()
            .flat_map(|(c, list)| list.iter().map(move |&(n, r)| (c, n, r)))
            .collect();
        edges.sort_unstable();
        EdgeIndex {
            center: edges.iter().map(|e| e.0).collect(),
            neighbor: edges.iter().map(|e| e.1).collect(),
            relation: edges.iter().map(|e| e.2).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.center.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center.is_empty()
    }
}

/// Training triples plus inverse copies, and per-direction adjacency.
///
/// Relation ids `0..R` are the original relations, `R..2R` their inverses and
/// `2R` the self-loop relation. Self-loops are never materialised as triples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedGraph {
    num_entities: usize,
    num_relations: usize,
    triples: Vec<Triple>,
    out_adj: Vec<Vec<(usize, usize)>>,
    in_adj: Vec<Vec<(usize, usize)>>,
    out_edges: EdgeIndex,
    in_edges: EdgeIndex,
}

impl AugmentedGraph {
    pub fn new(store: &TripleStore) -> Self {
        let ne = store.num_entities();
        let nr = store.num_relations();
        let mut triples = Vec::with_capacity(2 * store.train.len());
        let mut out_adj = vec![Vec::new(); ne];
        let mut in_adj = vec![Vec::new(); ne];
        for t in &store.train {
            triples.push(*t);
            out_adj[t.head].push((t.tail, t.relation));
            in_adj[t.tail].push((t.head, t.relation));
        }
        for t in &store.train {
            triples.push(Triple::new(t.tail, t.relation + nr, t.head));
        }
        let out_edges = EdgeIndex::from_adjacency(&out_adj);
        let in_edges = EdgeIndex::from_adjacency(&in_adj);
        AugmentedGraph {
            num_entities: ne,
            num_relations: nr,
            triples,
            out_adj,
            in_adj,
            out_edges,
            in_edges,
        }
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    /// Number of original relations `R`.
    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    /// Rows in the relation embedding table: forward, inverse, self-loop.
    pub fn relation_rows(&self) -> usize {
        2 * self.num_relations + 1
    }

    pub fn loop_relation(&self) -> usize {
        2 * self.num_relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn out_adj(&self, entity: usize) -> &[(usize, usize)] {
        &self.out_adj[entity]
    }

    pub fn in_adj(&self, entity: usize) -> &[(usize, usize)] {
        &self.in_adj[entity]
    }

    pub fn edges(&self, dir: Direction) -> &EdgeIndex {
        match dir {
            Direction::Out => &self.out_edges,
            Direction::In => &self.in_edges,
        }
    }
}

pub fn augment(store: &TripleStore) -> AugmentedGraph {
    AugmentedGraph::new(store)
}

/// `(entity, relation) → sorted tails`, covering forward and inverse directions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KnownTails {
    map: BTreeMap<(usize, usize), Vec<usize>>,
}

impl KnownTails {
    pub fn from_triples<'a>(num_relations: usize, triples: impl IntoIterator<Item = &'a Triple>) -> Self {
        let mut sets: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
        for t in triples {
            sets.entry((t.head, t.relation)).or_default().insert(t.tail);
            sets.entry((t.tail, t.relation + num_relations))
                .or_default()
                .insert(t.head);
        }
        KnownTails {
            map: sets
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect(),
        }
    }

    pub fn get(&self, entity: usize, relation: usize) -> &[usize] {
        self.map.get(&(entity, relation)).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, entity: usize, relation: usize, tail: usize) -> bool {
        self.get(entity, relation).binary_search(&tail).is_ok()
    }

    /// All condition pairs in ascending order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.map.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &[usize])> + '_ {
        self.map.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub fn known_tails(store: &TripleStore, splits: SplitSet) -> KnownTails {
    KnownTails::from_triples(
        store.num_relations(),
        splits.iter().flat_map(|s| store.split(s).iter()),
    )
}
