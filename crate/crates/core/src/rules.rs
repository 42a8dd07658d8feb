//! Bottom-up path-rule mining and rule-guided action augmentation.
//!
//! A rule `head(x, y) ⇐ r_1(x, z_1) ∧ … ∧ r_n(z_{n-1}, y)` is scored over
//! distinct endpoint pairs `(x, y)` of its body groundings: a pair is
//! positive when the head triplet exists and negative otherwise.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EdgeMask, EntityId, MultiModalKG, RelationId, RelationVocab, Triplet};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{softmax, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub body: Vec<RelationId>,
    pub head: RelationId,
    pub confidence: f64,
    pub pos: usize,
    pub neg: usize,
}

impl Rule {
    pub fn scored(body: Vec<RelationId>, head: RelationId, pos: usize, neg: usize) -> Self {
        Self {
            body,
            head,
            confidence: confidence(pos, neg),
            pos,
            neg,
        }
    }
}

/// `pos / (pos + neg)`, and 0 when there are no groundings.
pub fn confidence(pos: usize, neg: usize) -> f64 {
    if pos + neg == 0 {
        0.0
    } else {
        pos as f64 / (pos + neg) as f64
    }
}

fn rule_order(a: &Rule, b: &Rule) -> std::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.body.len().cmp(&b.body.len()))
        .then_with(|| a.body.cmp(&b.body))
}

/// Rules grouped by head, best first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RuleIndex {
    by_head: BTreeMap<RelationId, Vec<Rule>>,
}

impl RuleIndex {
    pub fn new(rules: impl IntoIterator<Item = Rule>) -> Self {
        let mut by_head: BTreeMap<RelationId, Vec<Rule>> = BTreeMap::new();
        for r in rules {
            by_head.entry(r.head).or_default().push(r);
        }
        for list in by_head.values_mut() {
            list.sort_by(rule_order);
        }
        Self { by_head }
    }

    pub fn rules_for(&self, head: RelationId) -> &[Rule] {
        self.by_head.get(&head).map_or(&[], Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Rule> {
        self.by_head.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.by_head.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_head.is_empty()
    }

    pub fn to_lines(&self, vocab: &RelationVocab) -> String {
        let mut out = String::new();
        for r in self.iter() {
            let body: Vec<&str> = r.body.iter().map(|&b| vocab.name(b)).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.confidence,
                r.pos,
                r.neg,
                vocab.name(r.head),
                body.join(",")
            ));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>, vocab: &RelationVocab) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_lines(vocab)).map_err(|e| Error::io(path, e))
    }

    pub fn parse(path: &Path, text: &str, vocab: &RelationVocab) -> Result<Self> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message,
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", f.len())));
            }
            let pos: usize = f[1].parse().map_err(|e| bad(format!("pos: {e}")))?;
            let neg: usize = f[2].parse().map_err(|e| bad(format!("neg: {e}")))?;
            let lookup = |name: &str| {
                vocab
                    .get(name)
                    .ok_or_else(|| Error::UnknownRelation(name.to_owned()))
            };
            let head = lookup(f[3])?;
            let body = f[4]
                .split(',')
                .map(lookup)
                .collect::<Result<Vec<_>>>()?;
            if body.is_empty() {
                return Err(bad("empty rule body".into()));
            }
            rules.push(Rule::scored(body, head, pos, neg));
        }
        Ok(Self::new(rules))
    }

    pub fn read(path: impl AsRef<Path>, vocab: &RelationVocab) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text, vocab)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub max_body_len: usize,
    /// Minimum positive groundings; values below 1 behave as 1.
    pub min_support: usize,
    pub min_conf: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            max_body_len: 3,
            min_support: 2,
            min_conf: 0.1,
        }
    }
}

/// Distinct `(first, last)` entity pairs connected by `body`.
pub fn body_pairs(kg: &MultiModalKG, body: &[RelationId]) -> Vec<(EntityId, EntityId)> {
    let Some((&first, rest)) = body.split_first() else {
        return Vec::new();
    };
    let mut pairs: Vec<(EntityId, EntityId)> = kg
        .triplets()
        .iter()
        .filter(|t| t.relation == first)
        .map(|t| (t.head, t.tail))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    for &r in rest {
        pairs = extend_pairs(kg, &pairs, r);
        if pairs.is_empty() {
            break;
        }
    }
    pairs
}

fn extend_pairs(
    kg: &MultiModalKG,
    pairs: &[(EntityId, EntityId)],
    r: RelationId,
) -> Vec<(EntityId, EntityId)> {
    let mut out = Vec::new();
    for &(a, b) in pairs {
        for &(_, c) in edges_with(kg.out_edges(b), r) {
            out.push((a, c));
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn edges_with(edges: &[(RelationId, EntityId)], r: RelationId) -> &[(RelationId, EntityId)] {
    let lo = edges.partition_point(|&(x, _)| x < r);
    let hi = edges.partition_point(|&(x, _)| x <= r);
    &edges[lo..hi]
}

/// `(pos, neg, conf)` of `body ⇒ head`.
pub fn rule_confidence(kg: &MultiModalKG, body: &[RelationId], head: RelationId) -> (usize, usize, f64) {
    let pairs = body_pairs(kg, body);
    let pos = pairs
        .iter()
        .filter(|&&(a, b)| kg.contains(Triplet::new(a, head, b)))
        .count();
    let neg = pairs.len() - pos;
    (pos, neg, confidence(pos, neg))
}

/// Exhaustive miner over every body up to `max_body_len`. Bodies that
/// step straight back along an inverse (`r` then `r_inv`) are skipped.
pub fn mine_rules(kg: &MultiModalKG, cfg: &MiningConfig) -> RuleIndex {
    let relations: Vec<RelationId> = kg.used_relations().into_iter().collect();
    let per_first: Vec<Vec<Rule>> = relations
        .par_iter()
        .map(|&r| {
            let mut found = Vec::new();
            let pairs = body_pairs(kg, &[r]);
            grow(kg, cfg, &relations, &mut vec![r], &pairs, &mut found);
            found
        })
        .collect();
    RuleIndex::new(per_first.into_iter().flatten())
}

fn grow(
    kg: &MultiModalKG,
    cfg: &MiningConfig,
    relations: &[RelationId],
    body: &mut Vec<RelationId>,
    pairs: &[(EntityId, EntityId)],
    found: &mut Vec<Rule>,
) {
    if pairs.is_empty() {
        return;
    }
    score_heads(kg, cfg, body, pairs, found);
    if body.len() >= cfg.max_body_len {
        return;
    }
    let back = body.last().map(|&l| kg.inverse_of(l));
    for &r in relations {
        if Some(r) == back {
            continue;
        }
        let next = extend_pairs(kg, pairs, r);
        body.push(r);
        grow(kg, cfg, relations, body, &next, found);
        body.pop();
    }
}

fn score_heads(
    kg: &MultiModalKG,
    cfg: &MiningConfig,
    body: &[RelationId],
    pairs: &[(EntityId, EntityId)],
    found: &mut Vec<Rule>,
) {
    let mut pos: BTreeMap<RelationId, usize> = BTreeMap::new();
    for &(a, b) in pairs {
        for &(r, t) in kg.out_edges(a) {
            if t == b {
                *pos.entry(r).or_default() += 1;
            }
        }
    }
    let min_support = cfg.min_support.max(1);
    for (head, p) in pos {
        if body.len() == 1 && body[0] == head {
            continue;
        }
        let rule = Rule::scored(body.to_vec(), head, p, pairs.len() - p);
        if rule.pos >= min_support && rule.confidence >= cfg.min_conf {
            found.push(rule);
        }
    }
}

/// End points reachable from `e` along `body`, never crossing masked edges.
pub fn walk_body(
    kg: &MultiModalKG,
    e: EntityId,
    body: &[RelationId],
    mask: EdgeMask,
) -> BTreeSet<EntityId> {
    let mut frontier = BTreeSet::from([e]);
    for &r in body {
        let mut next = BTreeSet::new();
        for &x in &frontier {
            for &(_, y) in edges_with(kg.out_edges(x), r) {
                if !mask.hides(Triplet::new(x, r, y)) {
                    next.insert(y);
                }
            }
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    frontier
}

fn absent(kg: &MultiModalKG, t: Triplet, mask: EdgeMask) -> bool {
    !kg.contains(t) || mask.hides(t)
}

/// Tails predicted for `(e, r_prime, ?)` by the best rule with head
/// `r_prime`, excluding tails already linked by `r_prime`.
pub fn derive_facts(
    kg: &MultiModalKG,
    e: EntityId,
    r_prime: RelationId,
    index: &RuleIndex,
    mask: EdgeMask,
) -> BTreeSet<EntityId> {
    let Some(rule) = index.rules_for(r_prime).first() else {
        return BTreeSet::new();
    };
    walk_body(kg, e, &rule.body, mask)
        .into_iter()
        .filter(|&t| absent(kg, Triplet::new(e, r_prime, t), mask))
        .collect()
}

/// Rule-derived `(relation, entity)` actions from `e` for each selected
/// relation, at most `cap` per relation, never repeating an original action.
pub fn augment_actions(
    kg: &MultiModalKG,
    e: EntityId,
    selected: &[RelationId],
    index: &RuleIndex,
    cap: usize,
    originals: &HashSet<(RelationId, EntityId)>,
    mask: EdgeMask,
) -> Vec<(RelationId, EntityId)> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for &r in selected {
        let mut taken = 0;
        'rules: for rule in index.rules_for(r) {
            for t in walk_body(kg, e, &rule.body, mask) {
                if taken >= cap {
                    break 'rules;
                }
                let action = (r, t);
                if originals.contains(&action)
                    || !absent(kg, Triplet::new(e, r, t), mask)
                    || !seen.insert(action)
                {
                    continue;
                }
                out.push(action);
                taken += 1;
            }
        }
    }
    out
}

/// Hidden layer and output projection scoring relations from a state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
}

impl SelectorParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, state_dim: usize, d: usize, rng: &mut R) -> Self {
        let b_in = 1.0 / (state_dim as f64).sqrt();
        let b_h = 1.0 / (d as f64).sqrt();
        Self {
            w1: store.add("select.w1", Matrix::uniform(state_dim, d, b_in, rng)),
            b1: store.add("select.b1", Matrix::uniform(1, d, b_in, rng)),
            w2: store.add("select.w2", Matrix::uniform(d, d, b_h, rng)),
        }
    }
}

/// Attention over every relation in `table` given a state embedding.
pub fn relation_attention(
    state: &Matrix,
    table: &Matrix,
    store: &ParamStore,
    p: &SelectorParams,
) -> Vec<f64> {
    let hidden = state
        .matmul(store.get(p.w1))
        .add(store.get(p.b1))
        .map(f64::tanh);
    let key = hidden.matmul(store.get(p.w2));
    let scores = table.matmul(&key.transpose());
    softmax(scores.data())
}

/// The `x` relations with the largest attention, ties broken by id.
pub fn select_additional_relations(
    state: &Matrix,
    table: &Matrix,
    store: &ParamStore,
    p: &SelectorParams,
    x: usize,
) -> Vec<RelationId> {
    top_by_weight(&relation_attention(state, table, store, p), x)
}

pub fn top_by_weight(weights: &[f64], x: usize) -> Vec<RelationId> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(x)
        .map(|i| RelationId(i as u32))
        .collect()
}
