//! Rule-path demonstrations, path packages, the two-level discriminator and
//! the adversarial rewards and critic losses built on it.

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kg::{EdgeMask, EntityId, MultiModalKG, RelationId, Triplet};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{sigmoid, Matrix};

/// Keeps `log` arguments inside `[1e-7, 1 - 1e-7]` without a flat region.
const SQUASH: f64 = 1e-7;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DemoPath {
    pub relations: Vec<RelationId>,
    /// Source first.
    pub entities: Vec<EntityId>,
}

impl DemoPath {
    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }
}

/// Simple `h → t` paths of length `≤ max_len` avoiding the edge itself.
pub fn alternative_paths(kg: &MultiModalKG, edge: Triplet, max_len: usize) -> Vec<DemoPath> {
    let mask = EdgeMask::new(edge);
    let mut out = Vec::new();
    let mut rels = Vec::new();
    let mut ents = vec![edge.head];
    walk(kg, edge.tail, max_len, mask, &mut rels, &mut ents, &mut out);
    out
}

fn walk(
    kg: &MultiModalKG,
    target: EntityId,
    budget: usize,
    mask: EdgeMask,
    rels: &mut Vec<RelationId>,
    ents: &mut Vec<EntityId>,
    out: &mut Vec<DemoPath>,
) {
    let at = *ents.last().expect("non-empty");
    if at == target && !rels.is_empty() {
        out.push(DemoPath {
            relations: rels.clone(),
            entities: ents.clone(),
        });
        return;
    }
    if budget == 0 {
        return;
    }
    for &(r, e) in kg.out_edges(at) {
        if mask.hides(Triplet::new(at, r, e)) || (e != target && ents.contains(&e)) {
            continue;
        }
        rels.push(r);
        ents.push(e);
        walk(kg, target, budget - 1, mask, rels, ents, out);
        rels.pop();
        ents.pop();
    }
}

/// The `n` shortest alternative paths over every `(h, r_q, t)` edge, ties
/// broken by relation sequence then entity sequence.
pub fn sample_demonstrations(kg: &MultiModalKG, r_q: RelationId, n: usize, max_len: usize) -> Vec<DemoPath> {
    let mut all = BTreeSet::new();
    for &t in kg.triplets() {
        if t.relation == r_q {
            all.extend(alternative_paths(kg, t, max_len));
        }
    }
    let mut all: Vec<DemoPath> = all.into_iter().collect();
    all.sort_by(|a, b| {
        a.len()
            .cmp(&b.len())
            .then_with(|| a.relations.cmp(&b.relations))
            .then_with(|| a.entities.cmp(&b.entities))
    });
    all.truncate(n);
    all
}

/// Demonstrations keyed by `(graph hash, r_q, n, max_len)`, optionally
/// mirrored to JSON files in a directory.
#[derive(Debug, Default)]
pub struct DemoCache {
    dir: Option<PathBuf>,
    entries: HashMap<(String, RelationId, usize, usize), Vec<DemoPath>>,
}

impl DemoCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            entries: HashMap::new(),
        }
    }

    fn file(&self, hash: &str, r: RelationId, n: usize, l: usize) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(format!("demos-{hash}-{}-{n}-{l}.json", r.0)))
    }

    pub fn get(&mut self, kg: &MultiModalKG, r_q: RelationId, n: usize, max_len: usize) -> Result<&[DemoPath]> {
        let hash = kg.stable_hash();
        let key = (hash.clone(), r_q, n, max_len);
        if !self.entries.contains_key(&key) {
            let file = self.file(&hash, r_q, n, max_len);
            let paths = match &file {
                Some(f) if f.exists() => {
                    let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
                    serde_json::from_str(&text)?
                }
                _ => {
                    let p = sample_demonstrations(kg, r_q, n, max_len);
                    if let Some(f) = &file {
                        if let Some(parent) = f.parent() {
                            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                        }
                        std::fs::write(f, serde_json::to_string(&p)?).map_err(|e| Error::io(f, e))?;
                    }
                    p
                }
            };
            self.entries.insert(key.clone(), paths);
        }
        Ok(&self.entries[&key])
    }
}

/// Sum of the embeddings of `relations` padded with STOP to `max_len`.
/// STOP is the last row of `table`.
pub fn relation_path_embedding(table: &Matrix, relations: &[RelationId], max_len: usize) -> Vec<f64> {
    let stop = table.rows() - 1;
    let mut out = vec![0.0; table.cols()];
    for k in 0..relations.len().max(max_len) {
        let row = match relations.get(k) {
            Some(r) if !r.is_stop() => r.index(),
            _ => stop,
        };
        for (o, x) in out.iter_mut().zip(table.row(row)) {
            *o += x;
        }
    }
    out
}

/// Per-entity rows flattened into `slots` rows, truncated or zero-padded.
pub fn entity_path_embedding(z_rows: &Matrix, slots: usize) -> Vec<f64> {
    let mut out = vec![0.0; slots * z_rows.cols()];
    let take = z_rows.rows().min(slots) * z_rows.cols();
    out[..take].copy_from_slice(&z_rows.data()[..take]);
    out
}

/// Concatenates up to `n` path vectors of width `width`; empty slots stay zero.
pub fn package(paths: &[Vec<f64>], n: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(1, n * width);
    for (slot, p) in paths.iter().take(n).enumerate() {
        assert_eq!(p.len(), width, "path width");
        out.data_mut()[slot * width..(slot + 1) * width].copy_from_slice(p);
    }
    out
}

/// `U(0,1)` entries in the first `occupied` slots, zero elsewhere.
pub fn noise_package<R: Rng + ?Sized>(rng: &mut R, n: usize, width: usize, occupied: usize) -> Matrix {
    let mut out = Matrix::zeros(1, n * width);
    for x in out.data_mut().iter_mut().take(occupied.min(n) * width) {
        *x = rng.gen::<f64>();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    pub d: usize,
    pub n_paths: usize,
    pub max_steps: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Width of one entity's fused row.
    pub entity_width: usize,
}

impl DiscConfig {
    pub fn new(d: usize, n_paths: usize, max_steps: usize, entity_width: usize) -> Self {
        Self {
            d,
            n_paths,
            max_steps,
            channels: 8,
            kernel: d,
            stride: d,
            entity_width,
        }
    }

    pub fn package_width(&self) -> usize {
        self.n_paths * self.d
    }

    pub fn windows(&self) -> usize {
        (self.package_width() - self.kernel) / self.stride + 1
    }

    pub fn entity_slots(&self) -> usize {
        self.max_steps + 1
    }

    pub fn entity_package_width(&self) -> usize {
        self.n_paths * self.entity_slots() * self.entity_width
    }

    fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.kernel > self.package_width() {
            return Err(Error::config(
                "conv_kernel",
                format!("kernel {} / stride {} do not fit a package of {}", self.kernel, self.stride, self.package_width()),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscParams {
    /// Fixed relation embeddings with STOP as the last row.
    pub relations: ParamId,
    pub conv_k: ParamId,
    pub conv_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ws1: ParamId,
    pub bs1: ParamId,
    pub ws2: ParamId,
    pub bs2: ParamId,
    pub we: ParamId,
    pub be: ParamId,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscConfig,
    pub store: ParamStore,
    pub params: DiscParams,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: DiscConfig, n_relations: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c = &config;
        let mut add = |name: &str, r: usize, cols: usize, fan: usize| {
            let bound = 1.0 / (fan.max(1) as f64).sqrt();
            store.add(format!("discriminator.{name}"), Matrix::uniform(r, cols, bound, rng))
        };
        let flat = c.windows() * c.channels;
        let params = DiscParams {
            relations: add("relations", n_relations + 1, c.d, 1),
            conv_k: add("conv_k", c.kernel, c.channels, c.kernel),
            conv_b: add("conv_b", 1, c.channels, c.kernel),
            w1: add("w1", flat, c.d, flat),
            b1: add("b1", 1, c.d, flat),
            w2: add("w2", c.d, c.d, c.d),
            b2: add("b2", 1, c.d, c.d),
            ws1: add("ws1", c.d, c.d, c.d),
            bs1: add("bs1", 1, c.d, c.d),
            ws2: add("ws2", c.d, 1, c.d),
            bs2: add("bs2", 1, 1, c.d),
            we: add("we", c.entity_package_width(), 1, c.entity_package_width()),
            be: add("be", 1, 1, c.entity_package_width()),
        };
        Ok(Self { config, store, params })
    }

    pub fn relation_table(&self) -> &Matrix {
        self.store.get(self.params.relations)
    }

    pub fn relation_embedding(&self, relations: &[RelationId]) -> Vec<f64> {
        relation_path_embedding(self.relation_table(), relations, self.config.max_steps)
    }

    fn im2col(&self, batch: usize) -> Vec<usize> {
        let c = &self.config;
        let width = c.package_width();
        let mut idx = Vec::with_capacity(batch * c.windows() * c.kernel);
        for b in 0..batch {
            for p in 0..c.windows() {
                for t in 0..c.kernel {
                    idx.push(b * width + p * c.stride + t);
                }
            }
        }
        idx
    }

    /// Semantic vectors `c_1` (`B×d`) for a batch of packages (`B×Nd`).
    pub fn conv_semantic_tape(&self, g: &mut Graph, mu: Var) -> Var {
        self.relation_forward(g, mu).c1
    }

    fn relation_forward(&self, g: &mut Graph, mu: Var) -> RelForward {
        let c = &self.config;
        let p = &self.params;
        let s = &self.store;
        let batch = g.value(mu).rows();
        let idx = self.im2col(batch);
        let cols = g.gather_flat(mu, &idx, batch * c.windows(), c.kernel);
        let k = g.param(s, p.conv_k);
        let kb = g.param(s, p.conv_b);
        let a0 = g.matmul(cols, k);
        let a0 = g.add_row(a0, kb);
        let h0 = g.relu(a0);
        let f0 = g.reshape(h0, batch, c.windows() * c.channels);
        let w1 = g.param(s, p.w1);
        let b1 = g.param(s, p.b1);
        let a1 = g.matmul(f0, w1);
        let a1 = g.add_row(a1, b1);
        let h1 = g.relu(a1);
        let w2 = g.param(s, p.w2);
        let b2 = g.param(s, p.b2);
        let c1 = g.matmul(h1, w2);
        let c1 = g.add_row(c1, b2);
        let ws1 = g.param(s, p.ws1);
        let bs1 = g.param(s, p.bs1);
        let a2 = g.matmul(c1, ws1);
        let a2 = g.add_row(a2, bs1);
        let h2 = g.relu(a2);
        let ws2 = g.param(s, p.ws2);
        let bs2 = g.param(s, p.bs2);
        let logit = g.matmul(h2, ws2);
        let logit = g.add_row(logit, bs2);
        let score = g.sigmoid(logit);
        RelForward {
            batch,
            idx,
            a0,
            a1,
            a2,
            c1,
            score,
        }
    }

    /// Relation-level scores (`B×1`).
    pub fn relation_scores_tape(&self, g: &mut Graph, nu: Var) -> Var {
        self.relation_forward(g, nu).score
    }

    /// Entity-level scores (`B×1`).
    pub fn entity_scores_tape(&self, g: &mut Graph, kappa: Var) -> Var {
        let we = g.param(&self.store, self.params.we);
        let be = g.param(&self.store, self.params.be);
        let t = g.tanh(kappa);
        let s = g.matmul(t, we);
        let s = g.add_row(s, be);
        g.sigmoid(s)
    }

    pub fn conv_semantic(&self, mu: &Matrix) -> Matrix {
        let mut g = Graph::new();
        let v = g.constant(mu.clone());
        let c1 = self.conv_semantic_tape(&mut g, v);
        g.value(c1).clone()
    }

    pub fn discriminate_relation(&self, nu: &Matrix) -> Vec<f64> {
        let mut g = Graph::new();
        let v = g.constant(nu.clone());
        let s = self.relation_scores_tape(&mut g, v);
        g.value(s).data().to_vec()
    }

    pub fn discriminate_entity(&self, kappa: &Matrix) -> Vec<f64> {
        let mut g = Graph::new();
        let v = g.constant(kappa.clone());
        let s = self.entity_scores_tape(&mut g, v);
        g.value(s).data().to_vec()
    }

    /// `t = σ(c_1 · u_rq)` for a single package.
    pub fn correlation(&self, mu: &Matrix, r_q: RelationId) -> f64 {
        let c1 = self.conv_semantic(mu);
        let u = self.relation_table().row(r_q.index());
        package_query_correlation(c1.data(), u)
    }

    /// Leave-one-out filtering of demonstrations by their effect on `t`.
    pub fn counterfactual_filter(&self, demos: &[DemoPath], r_q: RelationId) -> Filtered {
        let n = self.config.n_paths;
        let width = self.config.d;
        let used = demos.len().min(n);
        let embeds: Vec<Vec<f64>> = demos.iter().take(n).map(|p| self.relation_embedding(&p.relations)).collect();
        let full = package(&embeds, n, width);
        let t_full = self.correlation(&full, r_q);
        let mut kept = Vec::new();
        for slot in 0..used {
            let mut without = full.clone();
            without.data_mut()[slot * width..(slot + 1) * width].fill(0.0);
            if t_full - self.correlation(&without, r_q) > 0.0 {
                kept.push(slot);
            }
        }
        if kept.is_empty() {
            Filtered {
                kept: (0..used).collect(),
                fallback: true,
            }
        } else {
            Filtered { kept, fallback: false }
        }
    }

    /// `D(ν_P) - D(ν_Ω) + λ (‖∇ D(p̂)‖ - 1)²` averaged over rows, with
    /// `p̂ = ε ν_Ω + (1-ε) ν_P` per row.
    pub fn critic_loss_relation_tape(
        &self,
        g: &mut Graph,
        nu_p: &Matrix,
        nu_omega: &Matrix,
        eps: &[f64],
        lambda: f64,
    ) -> Var {
        let b = nu_p.rows();
        let p = g.constant(nu_p.clone());
        let o = g.constant(nu_omega.clone());
        let dp = self.relation_scores_tape(g, p);
        let d_o = self.relation_scores_tape(g, o);
        let diff = g.sub(dp, d_o);
        let mut total = g.sum(diff);
        if lambda != 0.0 {
            let mixed = interpolate(nu_p, nu_omega, eps);
            let x = g.constant(mixed);
            let pen = self.gradient_penalty_tape(g, x);
            let pen = g.scale(pen, lambda);
            total = g.add(total, pen);
        }
        g.scale(total, 1.0 / b as f64)
    }

    /// `Σ_rows (‖∂D/∂x_row‖ - 1)²`, differentiable in the parameters.
    pub fn gradient_penalty_tape(&self, g: &mut Graph, x: Var) -> Var {
        let norms = self.input_gradient_norms(g, x);
        let centered = g.add_const(norms, -1.0);
        let sq = g.square(centered);
        g.sum(sq)
    }

    /// Row norms (`B×1`) of the relation score's input gradient.
    pub fn input_gradient_norms(&self, g: &mut Graph, x: Var) -> Var {
        let c = &self.config;
        let p = &self.params;
        let s = &self.store;
        let f = self.relation_forward(g, x);
        let mask = |g: &mut Graph, v: Var| {
            let m = g.value(v).map(|a| if a > 0.0 { 1.0 } else { 0.0 });
            g.constant(m)
        };
        let m0 = mask(g, f.a0);
        let m1 = mask(g, f.a1);
        let m2 = mask(g, f.a2);
        let one_minus = g.one_minus(f.score);
        let dlogit = g.mul(f.score, one_minus);
        let ws2 = g.param(s, p.ws2);
        let ws2t = g.transpose(ws2);
        let gh2 = g.matmul(dlogit, ws2t);
        let ga2 = g.mul(gh2, m2);
        let ws1 = g.param(s, p.ws1);
        let ws1t = g.transpose(ws1);
        let gc1 = g.matmul(ga2, ws1t);
        let w2 = g.param(s, p.w2);
        let w2t = g.transpose(w2);
        let gh1 = g.matmul(gc1, w2t);
        let ga1 = g.mul(gh1, m1);
        let w1 = g.param(s, p.w1);
        let w1t = g.transpose(w1);
        let gf0 = g.matmul(ga1, w1t);
        let gh0 = g.reshape(gf0, f.batch * c.windows(), c.channels);
        let ga0 = g.mul(gh0, m0);
        let k = g.param(s, p.conv_k);
        let kt = g.transpose(k);
        let gcols = g.matmul(ga0, kt);
        let gx = g.scatter_flat(gcols, &f.idx, f.batch, c.package_width());
        let sq = g.square(gx);
        let rows = g.row_sums(sq);
        let rows = g.add_const(rows, NORM_EPS);
        g.sqrt(rows)
    }

    /// `-(log D(κ_Ω) + log(1 - D(κ_P)))` averaged over rows.
    pub fn critic_loss_entity_tape(&self, g: &mut Graph, kappa_p: &Matrix, kappa_omega: &Matrix) -> Var {
        let b = kappa_p.rows();
        let p = g.constant(kappa_p.clone());
        let o = g.constant(kappa_omega.clone());
        let dp = self.entity_scores_tape(g, p);
        let d_o = self.entity_scores_tape(g, o);
        let pos = squash(g, d_o);
        let lpos = g.log(pos);
        let neg = g.one_minus(dp);
        let neg = squash(g, neg);
        let lneg = g.log(neg);
        let both = g.add(lpos, lneg);
        let total = g.sum(both);
        g.scale(total, -1.0 / b as f64)
    }
}

struct RelForward {
    batch: usize,
    idx: Vec<usize>,
    a0: Var,
    a1: Var,
    a2: Var,
    c1: Var,
    score: Var,
}

fn squash(g: &mut Graph, p: Var) -> Var {
    let s = g.scale(p, 1.0 - 2.0 * SQUASH);
    g.add_const(s, SQUASH)
}

fn interpolate(a: &Matrix, b: &Matrix, eps: &[f64]) -> Matrix {
    assert_eq!(a.rows(), eps.len(), "one interpolation weight per row");
    let mut out = a.clone();
    for (r, &e) in eps.iter().enumerate() {
        for (o, (&x, &y)) in out.row_mut(r).iter_mut().zip(a.row(r).iter().zip(b.row(r))) {
            *o = e * y + (1.0 - e) * x;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Filtered {
    /// Indices into the input, in input order.
    pub kept: Vec<usize>,
    /// Set when nothing passed and the input was returned unfiltered.
    pub fallback: bool,
}

pub fn package_query_correlation(c1: &[f64], u_rq: &[f64]) -> f64 {
    sigmoid(c1.iter().zip(u_rq).map(|(a, b)| a * b).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    Adaptive,
    ZeroOne,
    RelationOnly,
    EntityOnly,
}

impl std::str::FromStr for RewardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "zero_one" => Ok(Self::ZeroOne),
            "relation_only" => Ok(Self::RelationOnly),
            "entity_only" => Ok(Self::EntityOnly),
            other => Err(Error::config("reward_mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// Scores of a generated package and of the noise package at both levels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelScores {
    pub relation: f64,
    pub relation_noise: f64,
    pub entity: f64,
    pub entity_noise: f64,
}

/// Adversarial reward for one path; `ZeroOne` is handled by the caller and
/// yields 0 here.
pub fn adaptive_reward(s: LevelScores, alpha: f64, mode: RewardMode) -> f64 {
    let r_r = (s.relation - s.relation_noise).max(0.0);
    let r_e = (s.entity - s.entity_noise).max(0.0);
    match mode {
        RewardMode::Adaptive => alpha * r_e + (1.0 - alpha) * r_r,
        RewardMode::RelationOnly => r_r,
        RewardMode::EntityOnly => r_e,
        RewardMode::ZeroOne => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disc(seed: u64, d: usize, n: usize) -> Discriminator {
        let cfg = DiscConfig::new(d, n, 3, 2);
        Discriminator::new(cfg, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn zero_params(d: &mut Discriminator) {
        let ids: Vec<ParamId> = d.store.ids().collect();
        for id in ids {
            d.store.get_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn only_direct_edge_gives_no_demonstrations() {
        let kg = MultiModalKG::from_named_triples([("a", "r", "b")]);
        assert!(sample_demonstrations(&kg, kg.relation_id("r").unwrap(), 5, 3).is_empty());
    }

    #[test]
    fn demonstrations_are_shortest_first() {
        let kg = MultiModalKG::from_named_triples([
            ("a", "rq", "d"),
            ("a", "x", "b"),
            ("b", "y", "d"),
            ("a", "z", "d"),
            ("a", "x", "c"),
            ("c", "x", "b"),
        ]);
        let rq = kg.relation_id("rq").unwrap();
        let demos = sample_demonstrations(&kg, rq, 5, 3);
        let lens: Vec<usize> = demos.iter().map(DemoPath::len).collect();
        assert_eq!(lens, vec![1, 2, 3]);
        assert_eq!(demos[0].relations, vec![kg.relation_id("z").unwrap()]);
        assert!(demos.iter().all(|p| *p.entities.last().unwrap() == kg.entity_id("d").unwrap()));
    }

    #[test]
    fn demo_cache_persists_to_disk() {
        let kg = MultiModalKG::from_named_triples([("a", "rq", "c"), ("a", "x", "b"), ("b", "y", "c")]);
        let rq = kg.relation_id("rq").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let first = DemoCache::with_dir(dir.path()).get(&kg, rq, 5, 3).unwrap().to_vec();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        let second = DemoCache::with_dir(dir.path()).get(&kg, rq, 5, 3).unwrap().to_vec();
        assert_eq!(first, second);
        assert_eq!(first.len(), 1);
    }

    #[test]
    fn relation_embedding_pads_with_stop() {
        let table = Matrix::from_vec(3, 1, vec![1.0, 10.0, 100.0]);
        assert_eq!(relation_path_embedding(&table, &[RelationId(1)], 3), vec![210.0]);
        assert_eq!(relation_path_embedding(&table, &[RelationId(0), RelationId::STOP], 2), vec![101.0]);
    }

    #[test]
    fn zero_package_zero_params_gives_half() {
        let mut d = disc(0, 4, 2);
        zero_params(&mut d);
        let z = Matrix::zeros(1, 8);
        assert!(d.conv_semantic(&z).data().iter().all(|&x| x == 0.0));
        assert_eq!(d.discriminate_relation(&z), vec![0.5]);
        assert_eq!(d.discriminate_entity(&Matrix::zeros(1, d.config.entity_package_width())), vec![0.5]);
    }

    #[test]
    fn single_tap_identity_conv_passes_relu_of_input() {
        let cfg = DiscConfig {
            d: 3,
            n_paths: 1,
            max_steps: 1,
            channels: 1,
            kernel: 1,
            stride: 1,
            entity_width: 1,
        };
        let mut d = Discriminator::new(cfg, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        zero_params(&mut d);
        d.store.get_mut(d.params.conv_k).data_mut()[0] = 1.0;
        *d.store.get_mut(d.params.w1) = Matrix::identity(3);
        *d.store.get_mut(d.params.w2) = Matrix::identity(3);
        let mu = Matrix::row_vector(vec![0.5, -2.0, 1.5]);
        assert_eq!(d.conv_semantic(&mu).data(), &[0.5, 0.0, 1.5]);
    }

    fn conv_oracle(d: &Discriminator, mu: &[f64]) -> Vec<f64> {
        let c = &d.config;
        let s = &d.store;
        let p = &d.params;
        let k = s.get(p.conv_k);
        let kb = s.get(p.conv_b);
        let mut flat = Vec::new();
        for w in 0..c.windows() {
            for ch in 0..c.channels {
                let mut a = kb.get(0, ch);
                for t in 0..c.kernel {
                    a += mu[w * c.stride + t] * k.get(t, ch);
                }
                flat.push(a.max(0.0));
            }
        }
        let dense = |x: &[f64], w: &Matrix, b: &Matrix, relu: bool| -> Vec<f64> {
            (0..w.cols())
                .map(|j| {
                    let v = b.get(0, j) + x.iter().enumerate().map(|(i, xi)| xi * w.get(i, j)).sum::<f64>();
                    if relu {
                        v.max(0.0)
                    } else {
                        v
                    }
                })
                .collect()
        };
        let h1 = dense(&flat, s.get(p.w1), s.get(p.b1), true);
        dense(&h1, s.get(p.w2), s.get(p.b2), false)
    }

    #[test]
    fn conv_matches_sliding_window_oracle_for_any_stride() {
        for (kernel, stride) in [(4, 4), (3, 1), (5, 2)] {
            let cfg = DiscConfig {
                kernel,
                stride,
                ..DiscConfig::new(4, 3, 3, 2)
            };
            let d = Discriminator::new(cfg, 3, &mut ChaCha8Rng::seed_from_u64(kernel as u64)).unwrap();
            let mu = Matrix::uniform(1, 12, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
            let got = d.conv_semantic(&mu);
            for (a, b) in got.data().iter().zip(conv_oracle(&d, mu.data())) {
                assert!((a - b).abs() < 1e-12);
            }
            let c1 = conv_oracle(&d, mu.data());
            let ws1 = d.store.get(d.params.ws1);
            let h: Vec<f64> = (0..4)
                .map(|j| (d.store.get(d.params.bs1).get(0, j) + (0..4).map(|i| c1[i] * ws1.get(i, j)).sum::<f64>()).max(0.0))
                .collect();
            let logit = d.store.get(d.params.bs2).item()
                + h.iter().enumerate().map(|(i, x)| x * d.store.get(d.params.ws2).get(i, 0)).sum::<f64>();
            assert!((d.discriminate_relation(&mu)[0] - sigmoid(logit)).abs() < 1e-12);
        }
    }

    #[test]
    fn correlation_examples() {
        assert_eq!(package_query_correlation(&[1.0, 0.0], &[0.0, 1.0]), 0.5);
        let v = [2.0f64.sqrt(), 2.0f64.sqrt()];
        assert!((package_query_correlation(&v, &v) - 0.98201379).abs() < 1e-8);
        assert!(package_query_correlation(&[-30.0], &[30.0]) < 1e-100);
    }

    fn leave_one_out(d: &Discriminator, demos: &[DemoPath], rq: RelationId) -> Vec<usize> {
        let n = d.config.n_paths;
        let emb: Vec<Vec<f64>> = demos.iter().map(|p| d.relation_embedding(&p.relations)).collect();
        let full = d.correlation(&package(&emb, n, d.config.d), rq);
        (0..demos.len())
            .filter(|&i| {
                let rest: Vec<Vec<f64>> = emb
                    .iter()
                    .enumerate()
                    .map(|(j, e)| if j == i { vec![0.0; e.len()] } else { e.clone() })
                    .collect();
                full > d.correlation(&package(&rest, n, d.config.d), rq)
            })
            .collect()
    }

    #[test]
    fn filter_agrees_with_leave_one_out_and_is_a_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..20 {
            let d = disc(seed, 4, 5);
            let demos: Vec<DemoPath> = (0..5)
                .map(|_| DemoPath {
                    relations: (0..rng.gen_range(1..=3)).map(|_| RelationId(rng.gen_range(0..4))).collect(),
                    entities: vec![],
                })
                .collect();
            let f = d.counterfactual_filter(&demos, RelationId(1));
            let oracle = leave_one_out(&d, &demos, RelationId(1));
            if oracle.is_empty() {
                assert!(f.fallback);
                assert_eq!(f.kept, vec![0, 1, 2, 3, 4]);
            } else {
                assert_eq!(f.kept, oracle);
            }
        }
    }

    #[test]
    fn zero_slot_path_is_dropped() {
        let mut decided = 0;
        for seed in 0..20 {
            let mut d = disc(seed, 2, 2);
            let n = d.relation_table().rows();
            d.store.get_mut(d.params.relations).row_mut(n - 1).fill(0.0);
            d.store.get_mut(d.params.relations).row_mut(0).fill(0.0);
            let demos = vec![
                DemoPath { relations: vec![RelationId(1)], entities: vec![] },
                DemoPath { relations: vec![RelationId(0)], entities: vec![] },
            ];
            let f = d.counterfactual_filter(&demos, RelationId(1));
            if f.fallback {
                assert_eq!(f.kept, vec![0, 1]);
            } else {
                assert_eq!(f.kept, vec![0]);
                decided += 1;
            }
        }
        assert!(decided > 0);
    }

    #[test]
    fn reward_examples() {
        let s = LevelScores { relation: 0.9, relation_noise: 0.4, entity: 0.9, entity_noise: 0.4 };
        for a in [0.0, 0.2, 0.4, 1.0] {
            assert!((adaptive_reward(s, a, RewardMode::Adaptive) - 0.5).abs() < 1e-12);
        }
        let low = LevelScores { relation: 0.3, relation_noise: 0.4, entity: 0.1, entity_noise: 0.6 };
        assert_eq!(adaptive_reward(low, 0.4, RewardMode::Adaptive), 0.0);
        let mixed = LevelScores { relation: 0.8, relation_noise: 0.5, entity: 0.2, entity_noise: 0.6 };
        assert!((adaptive_reward(mixed, 0.4, RewardMode::RelationOnly) - 0.3).abs() < 1e-12);
        assert_eq!(adaptive_reward(mixed, 0.4, RewardMode::EntityOnly), 0.0);
    }

    #[test]
    fn relation_loss_special_cases() {
        let d = disc(2, 4, 2);
        let a = Matrix::uniform(2, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let b = Matrix::uniform(2, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let same = d.critic_loss_relation_tape(&mut g, &a, &a, &[0.3, 0.6], 2.0);
        let x = g.constant(a.clone());
        let pen = d.gradient_penalty_tape(&mut g, x);
        assert!((g.value(same).item() - 2.0 * g.value(pen).item() / 2.0).abs() < 1e-12);
        let plain = d.critic_loss_relation_tape(&mut g, &a, &b, &[0.3, 0.6], 0.0);
        let sa = d.discriminate_relation(&a);
        let sb = d.discriminate_relation(&b);
        let expect = (sa[0] - sb[0] + sa[1] - sb[1]) / 2.0;
        assert!((g.value(plain).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn input_gradient_norm_matches_finite_differences() {
        for seed in 0..5 {
            let d = disc(seed, 4, 2);
            let x = Matrix::uniform(1, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 50));
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let norm = d.input_gradient_norms(&mut g, xv);
            let h = 1e-6;
            let mut sq = 0.0;
            for k in 0..8 {
                let mut p = x.clone();
                p.data_mut()[k] += h;
                let mut m = x.clone();
                m.data_mut()[k] -= h;
                let fd = (d.discriminate_relation(&p)[0] - d.discriminate_relation(&m)[0]) / (2.0 * h);
                sq += fd * fd;
            }
            let fd_norm = sq.sqrt();
            let got = g.value(norm).item();
            assert!((got - fd_norm).abs() < 1e-3 * fd_norm + 2e-6, "{got} vs {fd_norm}");
        }
    }

    #[test]
    fn entity_loss_symmetric_point() {
        let mut d = disc(3, 4, 2);
        zero_params(&mut d);
        let w = d.config.entity_package_width();
        let mut g = Graph::new();
        let l = d.critic_loss_entity_tape(&mut g, &Matrix::zeros(1, w), &Matrix::zeros(1, w));
        assert!((g.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn losses_match_finite_differences() {
        for seed in 0..3 {
            let mut d = disc(seed, 4, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let a = Matrix::uniform(3, 8, 1.0, &mut rng);
            let b = Matrix::uniform(3, 8, 1.0, &mut rng);
            let w = d.config.entity_package_width();
            let ka = Matrix::uniform(3, w, 1.0, &mut rng);
            let kb = Matrix::uniform(3, w, 1.0, &mut rng);
            let eps = [0.2, 0.5, 0.9];
            let dd = d.clone();
            let trainable: Vec<ParamId> = d.store.ids().filter(|&id| id != d.params.relations).collect();
            let r = check_gradients(&mut d.store, Some(&trainable), 1e-6, |g, s| {
                let probe = Discriminator { store: s.clone(), ..dd.clone() };
                let lr = probe.critic_loss_relation_tape(g, &a, &b, &eps, 10.0);
                let le = probe.critic_loss_entity_tape(g, &ka, &kb);
                g.add(lr, le)
            });
            assert!(r.max_error < 1e-4, "{r:?}");
        }
    }
}
