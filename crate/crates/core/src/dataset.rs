//! Inductive train/test graph pairs, query partitions and planted-rule
//! synthetic graphs.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KgBuilder, MultiModalKG, RelationVocab, Triplet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphCounts {
    pub entities: usize,
    pub relations: usize,
    pub triplets: usize,
}

impl GraphCounts {
    /// Counts over base triplets and the relations they use.
    pub fn of(kg: &MultiModalKG) -> Self {
        let base: Vec<Triplet> = kg.base_triplets().collect();
        let entities: HashSet<EntityId> = base.iter().flat_map(|t| [t.head, t.tail]).collect();
        let relations: HashSet<_> = base.iter().map(|t| t.relation).collect();
        Self {
            entities: entities.len(),
            relations: relations.len(),
            triplets: base.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub train: GraphCounts,
    pub test: GraphCounts,
    pub target_fraction: f64,
    pub fraction: f64,
    pub n_roots: usize,
    pub k_hops: usize,
    pub per_hop_cap: usize,
    pub seed: u64,
    pub dropped_test_triplets: usize,
}

#[derive(Clone, Debug)]
pub struct InductivePair {
    pub train: MultiModalKG,
    pub test: MultiModalKG,
    pub report: SplitReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitParams {
    /// Starting root count; the search may move it.
    pub n_roots: usize,
    pub k_hops: usize,
    pub per_hop_cap: usize,
    pub target_fraction: f64,
    pub seed: u64,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self {
            n_roots: 10,
            k_hops: 2,
            per_hop_cap: 50,
            target_fraction: 0.1,
            seed: 0,
        }
    }
}

const TOLERANCE: f64 = 0.2;
const CAP_ESCALATIONS: usize = 8;

fn sub_seed(seed: u64, tag: &str, x: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(x.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Entities reached from `root` in `k_hops` hops, keeping at most `cap`
/// newly discovered neighbours per hop. Only `allowed` entities are visited.
fn expand(
    kg: &MultiModalKG,
    root: EntityId,
    k_hops: usize,
    cap: usize,
    seed: u64,
    allowed: &dyn Fn(EntityId) -> bool,
) -> BTreeSet<EntityId> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "root", root.0 as u64));
    let mut seen = BTreeSet::from([root]);
    let mut frontier = vec![root];
    for _ in 0..k_hops {
        let mut fresh: Vec<EntityId> = frontier
            .iter()
            .flat_map(|&e| kg.out_edges(e).iter().map(|&(_, n)| n))
            .filter(|n| allowed(*n) && !seen.contains(n))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        fresh.shuffle(&mut rng);
        fresh.truncate(cap);
        seen.extend(fresh.iter().copied());
        frontier = fresh;
        if frontier.is_empty() {
            break;
        }
    }
    seen
}

struct Sampler<'a> {
    kg: &'a MultiModalKG,
    order: Vec<EntityId>,
    k_hops: usize,
    seed: u64,
    allowed: &'a dyn Fn(EntityId) -> bool,
    pool: usize,
}

impl Sampler<'_> {
    fn entities(&self, n_roots: usize, cap: usize) -> BTreeSet<EntityId> {
        let mut all = BTreeSet::new();
        for &r in self.order.iter().take(n_roots) {
            all.extend(expand(self.kg, r, self.k_hops, cap, self.seed, self.allowed));
        }
        all
    }

    fn triplets(&self, ents: &BTreeSet<EntityId>) -> Vec<Triplet> {
        self.kg
            .base_triplets()
            .filter(|t| ents.contains(&t.head) && ents.contains(&t.tail))
            .collect()
    }

    fn fraction(&self, n_roots: usize, cap: usize) -> (f64, BTreeSet<EntityId>) {
        let ents = self.entities(n_roots, cap);
        let f = self.triplets(&ents).len() as f64 / self.pool.max(1) as f64;
        (f, ents)
    }

    /// Smallest-error root count for `cap` by bisection on the monotone
    /// root prefix.
    fn search(&self, target: f64, cap: usize) -> (usize, f64, BTreeSet<EntityId>) {
        let (mut lo, mut hi) = (1usize, self.order.len().max(1));
        let mut best = {
            let (f, e) = self.fraction(lo, cap);
            (lo, f, e)
        };
        while lo <= hi {
            let mid = lo + (hi - lo) / 2;
            let (f, e) = self.fraction(mid, cap);
            if (f - target).abs() <= TOLERANCE * target {
                return (mid, f, e);
            }
            if (f - target).abs() < (best.1 - target).abs() {
                best = (mid, f, e);
            }
            if f < target {
                lo = mid + 1;
            } else {
                if mid == 1 {
                    break;
                }
                hi = mid - 1;
            }
        }
        best
    }
}

/// Samples a training graph near `target_fraction` of the base triplets and
/// a test graph on disjoint entities from what remains.
pub fn sample_inductive_pair(kg: &MultiModalKG, params: &SplitParams) -> Result<InductivePair> {
    let total = kg.base_triplets().count();
    if total == 0 {
        return Err(Error::Empty("graph"));
    }
    if params.n_roots == 0 || params.k_hops == 0 || params.per_hop_cap == 0 {
        return Err(Error::config("n_roots", "n_roots, k_hops and per_hop_cap must be at least 1"));
    }
    if !(params.target_fraction > 0.0 && params.target_fraction < 1.0) {
        return Err(Error::config("fraction", "target fraction must lie in (0, 1)"));
    }
    let mut order: Vec<EntityId> = kg.entities().filter(|&e| !kg.out_edges(e).is_empty()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(params.seed, "train-roots", 0)));
    let everything = |_: EntityId| true;
    let sampler = Sampler {
        kg,
        order,
        k_hops: params.k_hops,
        seed: params.seed,
        allowed: &everything,
        pool: total,
    };
    let target = params.target_fraction;
    let mut cap = params.per_hop_cap;
    let mut tried = Vec::new();
    let mut chosen = None;
    for _ in 0..=CAP_ESCALATIONS {
        let (n, f, ents) = sampler.search(target, cap);
        tried.push(format!("cap {cap}: {n} roots -> {:.4}", f));
        if (f - target).abs() <= TOLERANCE * target {
            chosen = Some((n, f, ents));
            break;
        }
        let next = if f > target { (cap / 2).max(1) } else { cap.saturating_mul(2) };
        if next == cap {
            break;
        }
        cap = next;
    }
    let Some((n_roots, fraction, train_ents)) = chosen else {
        return Err(Error::SplitFailed(format!(
            "target {target} of {total} triplets; tried {}",
            tried.join(", ")
        )));
    };
    let train = kg.subgraph(sampler.triplets(&train_ents));
    let train_rel: HashSet<_> = train.base_triplets().map(|t| t.relation).collect();

    let outside = |e: EntityId| !train_ents.contains(&e);
    let mut rest_order: Vec<EntityId> = kg
        .entities()
        .filter(|&e| outside(e) && kg.out_edges(e).iter().any(|&(_, n)| outside(n)))
        .collect();
    rest_order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(params.seed, "test-roots", 0)));
    let rest = Sampler {
        kg,
        order: rest_order,
        k_hops: params.k_hops,
        seed: sub_seed(params.seed, "test", 0),
        allowed: &outside,
        pool: total,
    };
    let test_trips = if rest.order.is_empty() {
        Vec::new()
    } else {
        let (_, _, ents) = rest.search(0.5 * fraction, cap);
        rest.triplets(&ents)
    };
    let before = test_trips.len();
    let kept: Vec<Triplet> = test_trips.into_iter().filter(|t| train_rel.contains(&t.relation)).collect();
    let dropped = before - kept.len();
    let test = kg.subgraph(kept);
    let report = SplitReport {
        train: GraphCounts::of(&train),
        test: GraphCounts::of(&test),
        target_fraction: target,
        fraction,
        n_roots,
        k_hops: params.k_hops,
        per_hop_cap: cap,
        seed: params.seed,
        dropped_test_triplets: dropped,
    };
    Ok(InductivePair { train, test, report })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    SharedEntity(String),
    UnseenRelation(String),
}

/// Checks entity disjointness and relation containment by name.
pub fn verify_pair(pair: &InductivePair) -> std::result::Result<SplitReport, Vec<Violation>> {
    let used = |kg: &MultiModalKG| -> (BTreeSet<String>, BTreeSet<String>) {
        let mut e = BTreeSet::new();
        let mut r = BTreeSet::new();
        for t in kg.base_triplets() {
            e.insert(kg.entity_name(t.head).to_owned());
            e.insert(kg.entity_name(t.tail).to_owned());
            r.insert(kg.relation_name(t.relation).to_owned());
        }
        (e, r)
    };
    let (train_e, train_r) = used(&pair.train);
    let (test_e, test_r) = used(&pair.test);
    let mut v: Vec<Violation> = train_e
        .intersection(&test_e)
        .map(|n| Violation::SharedEntity(n.clone()))
        .collect();
    v.extend(test_r.difference(&train_r).map(|n| Violation::UnseenRelation(n.clone())));
    if v.is_empty() {
        Ok(pair.report.clone())
    } else {
        Err(v)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySplit {
    pub train: Vec<Triplet>,
    pub valid: Vec<Triplet>,
    pub test: Vec<Triplet>,
}

/// Seeded 70/10/20 partition of the base triplets.
pub fn partition_queries(kg: &MultiModalKG, seed: u64) -> QuerySplit {
    let mut all: Vec<Triplet> = kg.base_triplets().collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(seed, "queries", 0)));
    let n = all.len();
    let n_train = (n as f64 * 0.7).round() as usize;
    let n_valid = (n as f64 * 0.1).round() as usize;
    let test = all.split_off((n_train + n_valid).min(n));
    let valid = all.split_off(n_train.min(all.len()));
    QuerySplit { train: all, valid, test }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedRule {
    pub body: Vec<String>,
    pub head: String,
    /// Groundings whose head edge is present.
    pub support: usize,
    /// Groundings whose head edge is absent.
    pub violations: usize,
}

impl PlantedRule {
    pub fn new(body: &[&str], head: &str, support: usize, violations: usize) -> Self {
        Self {
            body: body.iter().map(|s| s.to_string()).collect(),
            head: head.to_owned(),
            support,
            violations,
        }
    }
}

/// Entities `e0…`, relations `r0…`; every grounding of every planted rule
/// uses fresh entities, and `noise_triplets` uniform random edges are added.
pub fn make_planted_mkg(
    n_entities: usize,
    n_relations: usize,
    rules: &[PlantedRule],
    noise_triplets: usize,
    seed: u64,
) -> Result<MultiModalKG> {
    let rel_names: Vec<String> = (0..n_relations).map(|i| format!("r{i}")).collect();
    for rule in rules {
        if rule.body.is_empty() || rule.body.len() > 3 {
            return Err(Error::Infeasible(format!("rule body length {} not in 1..=3", rule.body.len())));
        }
        for r in rule.body.iter().chain(std::iter::once(&rule.head)) {
            if !rel_names.contains(r) {
                return Err(Error::Infeasible(format!("relation `{r}` is not among r0..r{n_relations}")));
            }
        }
    }
    let needed: usize = rules.iter().map(|r| (r.support + r.violations) * (r.body.len() + 1)).sum();
    if needed > n_entities {
        return Err(Error::Infeasible(format!(
            "planted groundings need {needed} entities, only {n_entities} available"
        )));
    }
    if noise_triplets > 0 && (n_entities < 2 || n_relations == 0) {
        return Err(Error::Infeasible("noise needs two entities and one relation".into()));
    }
    let names: Vec<String> = (0..n_entities).map(|i| format!("e{i}")).collect();
    let mut vocab = RelationVocab::new();
    for r in &rel_names {
        vocab.intern(r);
    }
    let mut b = KgBuilder::with_relations(vocab);
    for n in &names {
        b.add_entity(n);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = 0usize;
    let mut edges = BTreeSet::new();
    for rule in rules {
        for g in 0..rule.support + rule.violations {
            let start = next;
            for (k, r) in rule.body.iter().enumerate() {
                edges.insert((start + k, r.clone(), start + k + 1));
            }
            if g < rule.support {
                edges.insert((start, rule.head.clone(), start + rule.body.len()));
            }
            next += rule.body.len() + 1;
        }
    }
    let mut added = 0;
    let mut attempts = 0;
    while added < noise_triplets && attempts < noise_triplets * 100 {
        attempts += 1;
        let h = rng.gen_range(0..n_entities);
        let t = rng.gen_range(0..n_entities);
        let r = rng.gen_range(0..n_relations);
        if h != t && edges.insert((h, rel_names[r].clone(), t)) {
            added += 1;
        }
    }
    for (h, r, t) in &edges {
        b.add(&names[*h], r, &names[*t]);
    }
    Ok(b.build())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::rule_confidence;

    fn random_graph(seed: u64, n: usize, m: usize, rels: usize) -> MultiModalKG {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = KgBuilder::new();
        for _ in 0..m {
            let h = rng.gen_range(0..n);
            let t = rng.gen_range(0..n);
            let r = rng.gen_range(0..rels);
            b.add(&format!("e{h}"), &format!("r{r}"), &format!("e{t}"));
        }
        b.build()
    }

    #[test]
    fn disconnected_cliques_split_by_component() {
        let mut b = KgBuilder::new();
        for c in 0..2 {
            for i in 0..6 {
                for j in 0..6 {
                    if i != j {
                        b.add(&format!("c{c}_{i}"), "r", &format!("c{c}_{j}"));
                    }
                }
            }
        }
        let kg = b.build();
        let pair = sample_inductive_pair(
            &kg,
            &SplitParams { n_roots: 1, k_hops: 1, per_hop_cap: 50, target_fraction: 0.5, seed: 3 },
        )
        .unwrap();
        let prefix = |g: &MultiModalKG| -> BTreeSet<String> {
            g.base_triplets().map(|t| g.entity_name(t.head)[..2].to_owned()).collect()
        };
        assert_eq!(prefix(&pair.train).len(), 1);
        assert!(prefix(&pair.test).is_disjoint(&prefix(&pair.train)));
        assert!(verify_pair(&pair).is_ok());
    }

    #[test]
    fn fractions_land_within_tolerance() {
        let kg = random_graph(1, 1500, 6000, 8);
        for target in [0.05, 0.10, 0.15] {
            let pair = sample_inductive_pair(&kg, &SplitParams { target_fraction: target, seed: 2, ..SplitParams::default() }).unwrap();
            let f = pair.train.base_triplets().count() as f64 / kg.base_triplets().count() as f64;
            assert!((f - target).abs() <= 0.2 * target, "{f} vs {target}");
            assert_eq!(pair.report.train, GraphCounts::of(&pair.train));
            verify_pair(&pair).unwrap();
        }
    }

    #[test]
    fn verifier_flags_shared_entities_and_unseen_relations() {
        let train = MultiModalKG::from_named_triples([("a", "r", "b")]);
        let test = MultiModalKG::from_named_triples([("b", "s", "c")]);
        let pair = InductivePair {
            report: SplitReport {
                train: GraphCounts::of(&train),
                test: GraphCounts::of(&test),
                target_fraction: 0.5,
                fraction: 0.5,
                n_roots: 1,
                k_hops: 1,
                per_hop_cap: 1,
                seed: 0,
                dropped_test_triplets: 0,
            },
            train,
            test,
        };
        let v = verify_pair(&pair).unwrap_err();
        assert_eq!(v, vec![Violation::SharedEntity("b".into()), Violation::UnseenRelation("s".into())]);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let kg = random_graph(4, 400, 1500, 5);
        let p = SplitParams { target_fraction: 0.1, seed: 9, ..SplitParams::default() };
        let a = sample_inductive_pair(&kg, &p).unwrap();
        let b = sample_inductive_pair(&kg, &p).unwrap();
        assert_eq!(a.train.to_tsv(), b.train.to_tsv());
        assert_eq!(a.test.to_tsv(), b.test.to_tsv());
    }

    #[test]
    fn impossible_target_errors() {
        let kg = MultiModalKG::from_named_triples([("a", "r", "b"), ("c", "r", "d")]);
        let p = SplitParams { target_fraction: 0.05, ..SplitParams::default() };
        assert!(matches!(sample_inductive_pair(&kg, &p), Err(Error::SplitFailed(_))));
    }

    #[test]
    fn query_partition_covers_every_triplet_once() {
        let kg = random_graph(5, 100, 300, 4);
        let s = partition_queries(&kg, 1);
        let n = kg.base_triplets().count();
        assert_eq!(s.train.len() + s.valid.len() + s.test.len(), n);
        assert_eq!(s.train.len(), (n as f64 * 0.7).round() as usize);
        let all: HashSet<Triplet> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn planted_rules_have_requested_confidence() {
        let kg = make_planted_mkg(100, 3, &[PlantedRule::new(&["r0", "r1"], "r2", 20, 0)], 0, 1).unwrap();
        let body = [kg.relation_id("r0").unwrap(), kg.relation_id("r1").unwrap()];
        assert_eq!(rule_confidence(&kg, &body, kg.relation_id("r2").unwrap()), (20, 0, 1.0));
        let kg = make_planted_mkg(100, 3, &[PlantedRule::new(&["r0", "r1"], "r2", 15, 5)], 0, 1).unwrap();
        assert_eq!(rule_confidence(&kg, &body, kg.relation_id("r2").unwrap()), (15, 5, 0.75));
    }

    #[test]
    fn planted_graph_is_seed_deterministic_and_checks_feasibility() {
        let rules = [PlantedRule::new(&["r0", "r1"], "r2", 10, 2)];
        let a = make_planted_mkg(80, 4, &rules, 30, 7).unwrap();
        let b = make_planted_mkg(80, 4, &rules, 30, 7).unwrap();
        assert_eq!(a.to_tsv(), b.to_tsv());
        assert_eq!(a.base_triplets().count(), 12 * 2 + 10 + 30);
        assert!(matches!(make_planted_mkg(20, 4, &rules, 0, 7), Err(Error::Infeasible(_))));
        assert!(make_planted_mkg(80, 2, &rules, 0, 7).is_err());
    }
}
