//! The multi-modal knowledge graph: symbol tables, triplets with inverse
//! closure, and sorted adjacency.
//!
//! Relation ids come in pairs: a base relation `r` gets an even id `2k` and
//! its inverse `r_inv` gets `2k + 1`, so [`RelationId::inverse`] is a bit
//! flip. A file that already names `r_inv` maps onto the same pair.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Suffix marking an inverse relation name.
pub const INVERSE_SUFFIX: &str = "_inv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    /// Sentinel relation of the self-loop STOP action.
    pub const STOP: RelationId = RelationId(u32::MAX);

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub fn inverse(self) -> RelationId {
        debug_assert!(!self.is_stop());
        RelationId(self.0 ^ 1)
    }

    #[inline]
    pub fn is_inverse(self) -> bool {
        self.0 & 1 == 1
    }

    #[inline]
    pub fn is_stop(self) -> bool {
        self == Self::STOP
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_stop() {
            f.write_str("STOP")
        } else {
            write!(f, "r{}", self.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triplet {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }

    pub fn inverse(self) -> Triplet {
        Triplet::new(self.tail, self.relation.inverse(), self.head)
    }
}

/// Edges hidden from a walk: a query triplet and its inverse.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EdgeMask(Option<Triplet>);

impl EdgeMask {
    pub const NONE: EdgeMask = EdgeMask(None);

    pub fn new(t: Triplet) -> Self {
        Self(Some(t))
    }

    pub fn hides(&self, t: Triplet) -> bool {
        match self.0 {
            Some(m) => m == t || m.inverse() == t,
            None => false,
        }
    }
}

/// Bijective name ↔ dense id mapping.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct SymbolTable {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl PartialEq for SymbolTable {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names
    }
}

impl From<Vec<String>> for SymbolTable {
    fn from(names: Vec<String>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as u32))
            .collect();
        Self { names, index }
    }
}

impl From<SymbolTable> for Vec<String> {
    fn from(t: SymbolTable) -> Self {
        t.names
    }
}

impl SymbolTable {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
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
}

/// Relation symbol table that always holds base/inverse pairs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationVocab(SymbolTable);

impl RelationVocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Interns `name`, creating its base/inverse pair on first sight.
    pub fn intern(&mut self, name: &str) -> RelationId {
        if let Some(id) = self.0.get(name) {
            return RelationId(id);
        }
        let (base, inverse) = match name.strip_suffix(INVERSE_SUFFIX) {
            Some(base) if !base.is_empty() => (base.to_owned(), true),
            _ => (name.to_owned(), false),
        };
        let base_id = match self.0.get(&base) {
            Some(id) => id,
            None => {
                let id = self.0.intern(&base);
                self.0.intern(&format!("{base}{INVERSE_SUFFIX}"));
                id
            }
        };
        RelationId(base_id + inverse as u32)
    }

    pub fn get(&self, name: &str) -> Option<RelationId> {
        self.0.get(name).map(RelationId)
    }

    pub fn name(&self, r: RelationId) -> &str {
        if r.is_stop() {
            "STOP"
        } else {
            self.0.name(r.0)
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = RelationId> {
        (0..self.0.len() as u32).map(RelationId)
    }

    pub fn names(&self) -> &[String] {
        self.0.names()
    }
}

/// Immutable multi-relational graph with inverse closure.
#[derive(Clone, Debug)]
pub struct MultiModalKG {
    entities: SymbolTable,
    relations: RelationVocab,
    triplets: Vec<Triplet>,
    triplet_set: HashSet<Triplet>,
    out_adj: Vec<Vec<(RelationId, EntityId)>>,
    in_adj: Vec<Vec<(RelationId, EntityId)>>,
}

#[derive(Clone, Debug, Default)]
pub struct KgBuilder {
    entities: SymbolTable,
    relations: RelationVocab,
    triplets: BTreeSet<Triplet>,
}

impl KgBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Seeds the relation table so ids agree with another graph.
    pub fn with_relations(relations: RelationVocab) -> Self {
        Self {
            relations,
            ..Self::default()
        }
    }

    pub fn add_entity(&mut self, name: &str) -> EntityId {
        EntityId(self.entities.intern(name))
    }

    pub fn add(&mut self, head: &str, relation: &str, tail: &str) -> Triplet {
        let h = self.add_entity(head);
        let t = self.add_entity(tail);
        let r = self.relations.intern(relation);
        let tr = Triplet::new(h, r, t);
        self.triplets.insert(tr);
        self.triplets.insert(tr.inverse());
        tr
    }

    pub fn build(self) -> MultiModalKG {
        let n = self.entities.len();
        let mut out_adj = vec![Vec::new(); n];
        let mut in_adj = vec![Vec::new(); n];
        for t in &self.triplets {
            out_adj[t.head.index()].push((t.relation, t.tail));
            in_adj[t.tail.index()].push((t.relation, t.head));
        }
        for list in out_adj.iter_mut().chain(in_adj.iter_mut()) {
            list.sort_unstable();
        }
        let triplets: Vec<Triplet> = self.triplets.into_iter().collect();
        let triplet_set = triplets.iter().copied().collect();
        MultiModalKG {
            entities: self.entities,
            relations: self.relations,
            triplets,
            triplet_set,
            out_adj,
            in_adj,
        }
    }
}

impl MultiModalKG {
    pub fn from_named_triples<'a>(
        triples: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    ) -> Self {
        let mut b = KgBuilder::new();
        for (h, r, t) in triples {
            b.add(h, r, t);
        }
        b.build()
    }

    /// Parses a tab-separated triple file.
    pub fn load_triples(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_triples_with(path, KgBuilder::new())
    }

    /// Parses a triple file with relation ids pinned to `relations`.
    pub fn load_triples_with_relations(
        path: impl AsRef<Path>,
        relations: &RelationVocab,
    ) -> Result<Self> {
        Self::load_triples_with(path, KgBuilder::with_relations(relations.clone()))
    }

    fn load_triples_with(path: impl AsRef<Path>, mut builder: KgBuilder) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (h, r, t) in parse_triples(path, &text)? {
            builder.add(h, r, t);
        }
        Ok(builder.build())
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Size of the relation vocabulary (base + inverse).
    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_triplets(&self) -> usize {
        self.triplets.len()
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> {
        (0..self.entities.len() as u32).map(EntityId)
    }

    pub fn relation_ids(&self) -> impl Iterator<Item = RelationId> {
        self.relations.ids()
    }

    pub fn relations(&self) -> &RelationVocab {
        &self.relations
    }

    pub fn entity_table(&self) -> &SymbolTable {
        &self.entities
    }

    /// All triplets, including inverses, in `(head, relation, tail)` order.
    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    /// Triplets over base (non-inverse) relations.
    pub fn base_triplets(&self) -> impl Iterator<Item = Triplet> + '_ {
        self.triplets
            .iter()
            .copied()
            .filter(|t| !t.relation.is_inverse())
    }

    /// Relations (base and inverse) that occur in at least one triplet.
    pub fn used_relations(&self) -> BTreeSet<RelationId> {
        self.triplets.iter().map(|t| t.relation).collect()
    }

    pub fn contains(&self, t: Triplet) -> bool {
        self.triplet_set.contains(&t)
    }

    pub fn inverse_of(&self, r: RelationId) -> RelationId {
        r.inverse()
    }

    fn check(&self, e: EntityId) -> Result<()> {
        if e.index() < self.entities.len() {
            Ok(())
        } else {
            Err(Error::EntityOutOfRange(e.0))
        }
    }

    /// `(r, h)` for every `(h, r, e)`, sorted by relation then entity.
    pub fn incoming(&self, e: EntityId) -> Result<&[(RelationId, EntityId)]> {
        self.check(e)?;
        Ok(&self.in_adj[e.index()])
    }

    /// `(r, t)` for every `(e, r, t)`, sorted by relation then entity.
    pub fn outgoing(&self, e: EntityId) -> Result<&[(RelationId, EntityId)]> {
        self.check(e)?;
        Ok(&self.out_adj[e.index()])
    }

    pub(crate) fn out_edges(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        &self.out_adj[e.index()]
    }

    pub(crate) fn in_edges(&self, e: EntityId) -> &[(RelationId, EntityId)] {
        &self.in_adj[e.index()]
    }

    pub fn entity_name(&self, e: EntityId) -> &str {
        self.entities.name(e.0)
    }

    pub fn relation_name(&self, r: RelationId) -> &str {
        self.relations.name(r)
    }

    pub fn entity_id(&self, name: &str) -> Result<EntityId> {
        self.entities
            .get(name)
            .map(EntityId)
            .ok_or_else(|| Error::UnknownEntity(name.to_owned()))
    }

    pub fn relation_id(&self, name: &str) -> Result<RelationId> {
        self.relations
            .get(name)
            .ok_or_else(|| Error::UnknownRelation(name.to_owned()))
    }

    /// Base triplets as names, the graph's identity independent of id order.
    pub fn named_triplets(&self) -> BTreeSet<(String, String, String)> {
        self.base_triplets()
            .map(|t| {
                (
                    self.entity_name(t.head).to_owned(),
                    self.relation_name(t.relation).to_owned(),
                    self.entity_name(t.tail).to_owned(),
                )
            })
            .collect()
    }

    /// Base triplets as TSV, one per line, in id order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in self.base_triplets() {
            out.push_str(self.entity_name(t.head));
            out.push('\t');
            out.push_str(self.relation_name(t.relation));
            out.push('\t');
            out.push_str(self.entity_name(t.tail));
            out.push('\n');
        }
        out
    }

    pub fn write_triples(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Content hash over the sorted named base triplets.
    pub fn stable_hash(&self) -> String {
        let mut h = Sha256::new();
        for (a, r, b) in self.named_triplets() {
            h.update(a.as_bytes());
            h.update([0]);
            h.update(r.as_bytes());
            h.update([0]);
            h.update(b.as_bytes());
            h.update(*b"\n");
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Builds a new graph from a subset of this graph's triplets, keeping the
    /// relation vocabulary (and therefore relation ids) unchanged.
    pub fn subgraph(&self, triplets: impl IntoIterator<Item = Triplet>) -> MultiModalKG {
        let mut b = KgBuilder::with_relations(self.relations.clone());
        let mut base: Vec<Triplet> = triplets
            .into_iter()
            .map(|t| if t.relation.is_inverse() { t.inverse() } else { t })
            .collect();
        base.sort_unstable();
        base.dedup();
        for t in base {
            b.add(
                self.entity_name(t.head),
                self.relation_name(t.relation),
                self.entity_name(t.tail),
            );
        }
        b.build()
    }

    /// The same graph, entity and relation ids included, minus `hidden` and
    /// their inverses.
    pub fn without(&self, hidden: &[Triplet]) -> MultiModalKG {
        let drop: HashSet<Triplet> = hidden.iter().flat_map(|&t| [t, t.inverse()]).collect();
        let triplets: Vec<Triplet> = self.triplets.iter().copied().filter(|t| !drop.contains(t)).collect();
        let n = self.entities.len();
        let mut out_adj = vec![Vec::new(); n];
        let mut in_adj = vec![Vec::new(); n];
        for t in &triplets {
            out_adj[t.head.index()].push((t.relation, t.tail));
            in_adj[t.tail.index()].push((t.relation, t.head));
        }
        for list in out_adj.iter_mut().chain(in_adj.iter_mut()) {
            list.sort_unstable();
        }
        MultiModalKG {
            entities: self.entities.clone(),
            relations: self.relations.clone(),
            triplet_set: triplets.iter().copied().collect(),
            triplets,
            out_adj,
            in_adj,
        }
    }
}

impl MultiModalKG {
    /// Reads a triple file as queries against this graph. Lines naming an
    /// entity or relation the graph lacks are skipped and counted.
    pub fn load_queries(&self, path: impl AsRef<Path>) -> Result<(Vec<Triplet>, usize)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        let mut skipped = 0;
        for (h, r, t) in parse_triples(path, &text)? {
            match (self.entity_id(h), self.relation_id(r), self.entity_id(t)) {
                (Ok(h), Ok(r), Ok(t)) => out.push(Triplet::new(h, r, t)),
                _ => skipped += 1,
            }
        }
        Ok((out, skipped))
    }
}

/// Splits a TSV triple file into `(head, relation, tail)` fields.
pub fn parse_triples<'a>(path: &Path, text: &'a str) -> Result<Vec<(&'a str, &'a str, &'a str)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 || fields.iter().any(|f| f.trim().is_empty()) {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: format!(
                    "expected head<TAB>relation<TAB>tail, found {} field(s)",
                    fields.len()
                ),
            });
        }
        out.push((fields[0].trim(), fields[1].trim(), fields[2].trim()));
    }
    Ok(out)
}
