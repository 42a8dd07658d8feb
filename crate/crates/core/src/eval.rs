//! Filtered link-prediction ranking and MRR / Hits@N.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Env, EnvConfig, Policy, Query};
use crate::error::{Error, Result};
use crate::kg::{EntityId, RelationId, Triplet};
use crate::model::{Generator, ModelPolicy, Scene};

/// Rank of `target` among beam candidates after removing `filtered`
/// (other true answers). Ties count in the target's favour. An unreached
/// target sits at the midpoint between the reached count and `n_entities`.
pub fn rank_of(target: EntityId, candidates: &[(EntityId, f64)], filtered: &HashSet<EntityId>, n_entities: usize) -> f64 {
    let kept: Vec<&(EntityId, f64)> = candidates
        .iter()
        .filter(|(e, _)| *e == target || !filtered.contains(e))
        .collect();
    match kept.iter().find(|(e, _)| *e == target) {
        Some(&&(_, score)) => 1.0 + kept.iter().filter(|(_, s)| *s > score).count() as f64,
        None => ((n_entities + kept.len()) as f64 / 2.0).max(1.0),
    }
}

/// Known true tails for every `(head, relation)`.
#[derive(Clone, Debug, Default)]
pub struct KnownFacts(BTreeMap<(EntityId, RelationId), HashSet<EntityId>>);

impl KnownFacts {
    pub fn new(triplets: impl IntoIterator<Item = Triplet>) -> Self {
        let mut map: BTreeMap<(EntityId, RelationId), HashSet<EntityId>> = BTreeMap::new();
        for t in triplets {
            map.entry((t.head, t.relation)).or_default().insert(t.tail);
        }
        Self(map)
    }

    pub fn tails(&self, head: EntityId, relation: RelationId) -> HashSet<EntityId> {
        self.0.get(&(head, relation)).cloned().unwrap_or_default()
    }
}

pub fn rank_query<P: Policy + ?Sized>(
    env: &Env,
    policy: &mut P,
    query: Triplet,
    beam: usize,
    known: &KnownFacts,
) -> Result<f64> {
    let ranked = env.beam_infer(policy, &Query::from_triplet(query), beam)?;
    let mut filtered = known.tails(query.head, query.relation);
    filtered.remove(&query.tail);
    Ok(rank_of(query.tail, &ranked, &filtered, env.kg.num_entities()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits10: f64,
    pub count: usize,
}

pub fn metrics(ranks: &[f64]) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(Error::Empty("rank list"));
    }
    if let Some(r) = ranks.iter().find(|r| !(**r >= 1.0)) {
        return Err(Error::Shape(format!("rank {r} below 1")));
    }
    let n = ranks.len() as f64;
    Ok(Metrics {
        mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
        hits1: ranks.iter().filter(|&&r| r <= 1.0).count() as f64 / n,
        hits10: ranks.iter().filter(|&&r| r <= 10.0).count() as f64 / n,
        count: ranks.len(),
    })
}

/// Rows of `(label, metrics)` as a fixed-width table in percent.
pub fn table(rows: &[(String, Metrics)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}  {:>6}  {:>6}  {:>7}\n", "Model", "MRR", "Hits@1", "Hits@10");
    for (label, m) in rows {
        out.push_str(&format!(
            "{:<width$}  {:>6.1}  {:>6.1}  {:>7.1}\n",
            label,
            100.0 * m.mrr,
            100.0 * m.hits1,
            100.0 * m.hits10
        ));
    }
    out
}

/// Ranks every query with the generator, one encoding per query relation.
/// Results follow the input order.
pub fn evaluate(
    gen: &Generator,
    scene: Scene,
    env_cfg: &EnvConfig,
    queries: &[Triplet],
    known: &KnownFacts,
    beam: usize,
) -> Result<(Metrics, Vec<f64>)> {
    gen.check_scene(&scene)?;
    let mut groups: BTreeMap<RelationId, Vec<usize>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        groups.entry(q.relation).or_default().push(i);
    }
    let groups: Vec<(RelationId, Vec<usize>)> = groups.into_iter().collect();
    let env = Env::new(scene.kg, env_cfg);
    let per_group: Vec<Result<Vec<(usize, f64)>>> = groups
        .par_iter()
        .map(|(r, idx)| {
            let mut pol = ModelPolicy::new(gen, scene, *r);
            idx.iter()
                .map(|&i| rank_query(&env, &mut pol, queries[i], beam, known).map(|rank| (i, rank)))
                .collect()
        })
        .collect();
    let mut ranks = vec![0.0; queries.len()];
    for g in per_group {
        for (i, r) in g? {
            ranks[i] = r;
        }
    }
    Ok((metrics(&ranks)?, ranks))
}
