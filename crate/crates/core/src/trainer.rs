//! Adversarial training loop, checkpoints and ablation runs.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::{TrainConfig, Variant};
use crate::discriminator::{
    adaptive_reward, entity_path_embedding, noise_package, package, DemoCache, Discriminator, LevelScores, RewardMode,
};
use crate::env::{Env, EnvConfig, Query, Trajectory};
use crate::error::{Error, Result};
use crate::eval::{evaluate, KnownFacts, Metrics};
use crate::features::FeatureStore;
use crate::kg::{MultiModalKG, RelationId, RelationVocab, Triplet};
use crate::model::{Generator, ModelConfig, ModelPolicy, Scene};
use crate::params::{GradBuffer, Optimizer, ParamStore};
use crate::policy::{reinforce_gradients, Baseline, Sampling};
use crate::rules::{mine_rules, RuleIndex};
use crate::tensor::Matrix;

/// Queries with the graph they are answered on.
#[derive(Clone, Debug)]
pub struct EvalSet<'a> {
    pub kg: &'a MultiModalKG,
    pub features: &'a FeatureStore,
    pub pretrained: Option<&'a Matrix>,
    pub queries: &'a [Triplet],
    pub known: KnownFacts,
}

impl<'a> EvalSet<'a> {
    /// Filters against every edge of `kg` plus the queries themselves.
    pub fn new(kg: &'a MultiModalKG, features: &'a FeatureStore, queries: &'a [Triplet]) -> Self {
        let known = KnownFacts::new(
            kg.triplets()
                .iter()
                .copied()
                .chain(queries.iter().flat_map(|q| [*q, q.inverse()])),
        );
        Self {
            kg,
            features,
            pretrained: None,
            queries,
            known,
        }
    }

    pub fn scene(&self) -> Scene<'a> {
        Scene::new(self.kg, self.features).with_pretrained(self.pretrained)
    }
}

#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub kg: &'a MultiModalKG,
    pub features: &'a FeatureStore,
    pub pretrained: Option<&'a Matrix>,
    /// Edges of `kg` used as training queries.
    pub queries: &'a [Triplet],
    pub valid: Option<EvalSet<'a>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub mrr: f64,
    pub hits1: f64,
    pub hits10: f64,
    pub loss_r: f64,
    pub loss_e: f64,
    pub mean_reward: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub epoch: usize,
    pub relations: Vec<String>,
    /// Mined rules in rule-file format.
    pub rules: Option<String>,
    pub generator: ParamStore,
    pub discriminator: ParamStore,
    pub gen_opt: Optimizer,
    pub disc_opt: Optimizer,
    pub baseline: Baseline,
    pub rng: ChaCha8Rng,
    pub best_mrr: Option<f64>,
    pub since_best: usize,
}

const MAGIC: &[u8; 8] = b"MKGRCKPT";
const FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    segment: String,
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    config: TrainConfig,
    model: ModelConfig,
    epoch: usize,
    relations: Vec<String>,
    rules: Option<String>,
    gen_opt: Optimizer,
    disc_opt: Optimizer,
    baseline: Baseline,
    rng: ChaCha8Rng,
    best_mrr: Option<f64>,
    since_best: usize,
    tensors: Vec<TensorEntry>,
}

fn segment_of(name: &str) -> &'static str {
    match name.split('.').next() {
        Some("tair") => "tair",
        Some("ugan") => "ugan",
        Some("discriminator") => "discriminator",
        _ => "policy",
    }
}

fn vocab_from(names: &[String]) -> Result<RelationVocab> {
    let mut vocab = RelationVocab::new();
    for n in names {
        vocab.intern(n);
    }
    if vocab.names() != names {
        return Err(Error::Checkpoint("relation names do not form inverse pairs".into()));
    }
    Ok(vocab)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob: Vec<u8> = Vec::new();
        let mut tensors = Vec::new();
        for store in [&self.generator, &self.discriminator] {
            for (name, m) in store.iter() {
                tensors.push(TensorEntry {
                    segment: segment_of(name).to_owned(),
                    name: name.to_owned(),
                    rows: m.rows(),
                    cols: m.cols(),
                    offset: blob.len() / 8,
                });
                for x in m.data() {
                    blob.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            format: FORMAT,
            config: self.config.clone(),
            model: self.model.clone(),
            epoch: self.epoch,
            relations: self.relations.clone(),
            rules: self.rules.clone(),
            gen_opt: self.gen_opt.clone(),
            disc_opt: self.disc_opt.clone(),
            baseline: self.baseline,
            rng: self.rng.clone(),
            best_mrr: self.best_mrr,
            since_best: self.since_best,
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(12 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_owned());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("missing header"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(12..12 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if manifest.format != FORMAT {
            return Err(bad("unsupported format version"));
        }
        let blob = &bytes[12 + len..];
        let mut generator = ParamStore::new();
        let mut discriminator = ParamStore::new();
        for t in &manifest.tensors {
            let n = t.rows * t.cols;
            let raw = blob
                .get(t.offset * 8..(t.offset + n) * 8)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} out of bounds", t.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Matrix::from_vec(t.rows, t.cols, data);
            if t.segment == "discriminator" {
                discriminator.add(t.name.clone(), m);
            } else {
                generator.add(t.name.clone(), m);
            }
        }
        Ok(Self {
            config: manifest.config,
            model: manifest.model,
            epoch: manifest.epoch,
            relations: manifest.relations,
            rules: manifest.rules,
            generator,
            discriminator,
            gen_opt: manifest.gen_opt,
            disc_opt: manifest.disc_opt,
            baseline: manifest.baseline,
            rng: manifest.rng,
            best_mrr: manifest.best_mrr,
            since_best: manifest.since_best,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn vocab(&self) -> Result<RelationVocab> {
        vocab_from(&self.relations)
    }

    pub fn generator(&self) -> Result<Generator> {
        let mut gen = Generator::new(self.model.clone(), self.relations.len(), &mut ChaCha8Rng::seed_from_u64(0));
        adopt(&mut gen.store, &self.generator)?;
        Ok(gen)
    }

    pub fn discriminator(&self) -> Result<Discriminator> {
        let cfg = self.config.disc(self.model.z_dim());
        let mut disc = Discriminator::new(cfg, self.relations.len(), &mut ChaCha8Rng::seed_from_u64(0))?;
        adopt(&mut disc.store, &self.discriminator)?;
        Ok(disc)
    }

    pub fn rule_index(&self) -> Result<Option<RuleIndex>> {
        match &self.rules {
            None => Ok(None),
            Some(text) => Ok(Some(RuleIndex::parse(Path::new("<checkpoint>"), text, &self.vocab()?)?)),
        }
    }

    /// Loads `path` against this checkpoint's relation vocabulary.
    pub fn load_graph(&self, path: impl AsRef<Path>) -> Result<MultiModalKG> {
        MultiModalKG::load_triples_with_relations(path, &self.vocab()?)
    }
}

/// Replaces `target`'s values with `source`'s, requiring identical layout.
fn adopt(target: &mut ParamStore, source: &ParamStore) -> Result<()> {
    let want: Vec<(&str, (usize, usize))> = target.iter().map(|(n, m)| (n, m.shape())).collect();
    let have: Vec<(&str, (usize, usize))> = source.iter().map(|(n, m)| (n, m.shape())).collect();
    if want != have {
        return Err(Error::Checkpoint("parameter layout does not match the configuration".into()));
    }
    *target = source.clone();
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Highest validation MRR seen in this run; the last state if none improved.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<MetricsRecord>,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a TrainData<'a>,
    env_cfg: EnvConfig,
    gen: Generator,
    disc: Discriminator,
    gen_opt: Optimizer,
    disc_opt: Optimizer,
    baseline: Baseline,
    rng: ChaCha8Rng,
    rules: Option<Arc<RuleIndex>>,
    rules_text: Option<String>,
    demos: DemoCache,
    epoch: usize,
    best_mrr: Option<f64>,
    since_best: usize,
}

#[derive(Default)]
struct BatchStats {
    loss_r: f64,
    loss_e: f64,
    reward_sum: f64,
    rewards: usize,
}

struct Group {
    relation: RelationId,
    trajectories: Vec<Trajectory>,
    nu: Vec<Vec<f64>>,
    kappa: Vec<Vec<f64>>,
    demo_nu: Vec<Vec<f64>>,
    demo_kappa: Vec<Vec<f64>>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a TrainData<'a>) -> Result<Self> {
        cfg.validate()?;
        let model = resolve_model(&cfg, data)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n_rel = data.kg.num_relations();
        let gen = Generator::new(model.clone(), n_rel, &mut rng);
        let disc = Discriminator::new(cfg.disc(model.z_dim()), n_rel, &mut rng)?;
        let rules = cfg.augmentation_on.then(|| Arc::new(mine_rules(data.kg, &cfg.mining())));
        let rules_text = rules.as_ref().map(|r| r.to_lines(data.kg.relations()));
        let trainer = Self {
            env_cfg: cfg.env(),
            gen_opt: Optimizer::new(cfg.optimizer, cfg.lr, cfg.clip).with_weight_decay(cfg.weight_decay),
            disc_opt: Optimizer::new(cfg.optimizer, cfg.critic_lr, cfg.clip),
            baseline: Baseline {
                value: 0.0,
                decay: cfg.baseline_decay,
            },
            cfg,
            data,
            gen,
            disc,
            rng,
            rules,
            rules_text,
            demos: DemoCache::new(),
            epoch: 0,
            best_mrr: None,
            since_best: 0,
        };
        trainer.check_data()?;
        Ok(trainer)
    }

    /// Continues from `ckpt` exactly where it stopped.
    pub fn resume(ckpt: &Checkpoint, data: &'a TrainData<'a>) -> Result<Self> {
        if ckpt.relations != data.kg.relations().names() {
            return Err(Error::Checkpoint("relation vocabulary differs from the training graph".into()));
        }
        let model = resolve_model(&ckpt.config, data)?;
        if model != ckpt.model {
            return Err(Error::Checkpoint("feature dimensions differ from the checkpoint".into()));
        }
        let rules = ckpt.rule_index()?.map(Arc::new);
        let trainer = Self {
            cfg: ckpt.config.clone(),
            data,
            env_cfg: ckpt.config.env(),
            gen: ckpt.generator()?,
            disc: ckpt.discriminator()?,
            gen_opt: ckpt.gen_opt.clone(),
            disc_opt: ckpt.disc_opt.clone(),
            baseline: ckpt.baseline,
            rng: ckpt.rng.clone(),
            rules,
            rules_text: ckpt.rules.clone(),
            demos: DemoCache::new(),
            epoch: ckpt.epoch,
            best_mrr: ckpt.best_mrr,
            since_best: ckpt.since_best,
        };
        trainer.check_data()?;
        Ok(trainer)
    }

    fn check_data(&self) -> Result<()> {
        let kg = self.data.kg;
        if self.data.queries.is_empty() {
            return Err(Error::Empty("training queries"));
        }
        if let Some(q) = self.data.queries.iter().find(|q| !kg.contains(**q)) {
            return Err(Error::Shape(format!(
                "query ({}, {}, {}) is not an edge of the training graph",
                q.head, q.relation, q.tail
            )));
        }
        self.gen.check_scene(&self.train_scene())?;
        if let Some(v) = &self.data.valid {
            self.gen.check_scene(&v.scene())?;
        }
        Ok(())
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &Generator {
        &self.gen
    }

    pub fn rules(&self) -> Option<&RuleIndex> {
        self.rules.as_deref()
    }

    fn train_scene(&self) -> Scene<'a> {
        Scene::new(self.data.kg, self.data.features).with_pretrained(self.data.pretrained)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            model: self.gen.config.clone(),
            epoch: self.epoch,
            relations: self.data.kg.relations().names().to_vec(),
            rules: self.rules_text.clone(),
            generator: self.gen.store.clone(),
            discriminator: self.disc.store.clone(),
            gen_opt: self.gen_opt.clone(),
            disc_opt: self.disc_opt.clone(),
            baseline: self.baseline,
            rng: self.rng.clone(),
            best_mrr: self.best_mrr,
            since_best: self.since_best,
        }
    }

    /// Trains until `config.epochs` (or patience runs out), calling
    /// `on_epoch` after every epoch with its record and checkpoint.
    pub fn run_with(
        &mut self,
        mut on_epoch: impl FnMut(&MetricsRecord, &Checkpoint, bool) -> Result<()>,
    ) -> Result<TrainOutcome> {
        let mut best = None;
        let mut log = Vec::new();
        while self.epoch < self.cfg.epochs {
            let record = self.run_epoch()?;
            let improved = self.since_best == 0;
            let ckpt = self.checkpoint();
            on_epoch(&record, &ckpt, improved)?;
            if improved {
                best = Some(ckpt);
            }
            log.push(record);
            if self.cfg.patience > 0 && self.since_best >= self.cfg.patience {
                info!("no validation gain for {} epochs, stopping", self.since_best);
                break;
            }
        }
        let last = self.checkpoint();
        Ok(TrainOutcome {
            best: best.unwrap_or_else(|| last.clone()),
            last,
            log,
        })
    }

    pub fn run(&mut self) -> Result<TrainOutcome> {
        self.run_with(|_, _, _| Ok(()))
    }

    pub fn run_epoch(&mut self) -> Result<MetricsRecord> {
        let last_good = self.checkpoint();
        self.epoch += 1;
        let mut order: Vec<usize> = (0..self.data.queries.len()).collect();
        order.shuffle(&mut self.rng);
        let mut totals = BatchStats::default();
        let mut batches = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<Triplet> = chunk.iter().map(|&i| self.data.queries[i]).collect();
            let s = match self.train_batch(&batch) {
                Ok(s) => s,
                Err(Error::Diverged { what, .. } | Error::NonFinite(what)) => {
                    return Err(Error::Diverged {
                        epoch: self.epoch,
                        what,
                        last_good: Box::new(last_good),
                    })
                }
                Err(e) => return Err(e),
            };
            totals.loss_r += s.loss_r;
            totals.loss_e += s.loss_e;
            totals.reward_sum += s.reward_sum;
            totals.rewards += s.rewards;
            batches += 1;
        }
        let (split, m) = match self.validate() {
            Ok(v) => v,
            Err(Error::NonFinite(what)) => {
                return Err(Error::Diverged {
                    epoch: self.epoch,
                    what,
                    last_good: Box::new(last_good),
                })
            }
            Err(e) => return Err(e),
        };
        let record = MetricsRecord {
            epoch: self.epoch,
            split: split.to_owned(),
            mrr: m.mrr,
            hits1: m.hits1,
            hits10: m.hits10,
            loss_r: totals.loss_r / batches.max(1) as f64,
            loss_e: totals.loss_e / batches.max(1) as f64,
            mean_reward: totals.reward_sum / totals.rewards.max(1) as f64,
        };
        if self.best_mrr.is_none_or(|b| m.mrr > b) {
            self.best_mrr = Some(m.mrr);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        info!(
            "epoch {} {} mrr {:.4} hits@1 {:.4} reward {:.4}",
            record.epoch, record.split, record.mrr, record.hits1, record.mean_reward
        );
        Ok(record)
    }

    fn validate(&self) -> Result<(&'static str, Metrics)> {
        let limit = |qs: &'a [Triplet]| {
            if self.cfg.valid_limit == 0 {
                qs
            } else {
                &qs[..qs.len().min(self.cfg.valid_limit)]
            }
        };
        let rules = self.rules.as_deref();
        match &self.data.valid {
            Some(v) => {
                let (m, _) = evaluate(
                    &self.gen,
                    v.scene().with_rules(rules),
                    &self.env_cfg,
                    limit(v.queries),
                    &v.known,
                    self.cfg.beam,
                )?;
                Ok(("valid", m))
            }
            None => {
                let qs = &self.data.queries[..self.data.queries.len().min(if self.cfg.valid_limit == 0 {
                    50
                } else {
                    self.cfg.valid_limit
                })];
                let known = KnownFacts::new(self.data.kg.triplets().iter().copied());
                let (m, _) = evaluate(
                    &self.gen,
                    self.train_scene().with_rules(rules),
                    &self.env_cfg,
                    qs,
                    &known,
                    self.cfg.beam,
                )?;
                Ok(("train", m))
            }
        }
    }

    fn diverged(&self, what: String) -> Error {
        Error::Diverged {
            epoch: self.epoch,
            what,
            last_good: Box::new(self.checkpoint()),
        }
    }

    fn train_batch(&mut self, batch: &[Triplet]) -> Result<BatchStats> {
        let mode = self.cfg.reward_mode;
        let uses_rel = matches!(mode, RewardMode::Adaptive | RewardMode::RelationOnly);
        let uses_ent = matches!(mode, RewardMode::Adaptive | RewardMode::EntityOnly);
        let slots = self.cfg.max_steps + 1;
        let n = self.cfg.n_paths;
        let mut by_rel: BTreeMap<RelationId, Vec<Triplet>> = BTreeMap::new();
        for q in batch {
            by_rel.entry(q.relation).or_default().push(*q);
        }
        let rules = self.rules.clone();
        let pruned: Vec<(RelationId, Vec<Triplet>, MultiModalKG)> = by_rel
            .into_iter()
            .map(|(r, qs)| {
                let kg = self.data.kg.without(&qs);
                (r, qs, kg)
            })
            .collect();
        let scene_of = |kg| {
            Scene::new(kg, self.data.features)
                .with_pretrained(self.data.pretrained)
                .with_rules(rules.as_deref())
        };
        let mut groups = Vec::with_capacity(pruned.len());
        for (r, qs, kg) in &pruned {
            let r = *r;
            let env = Env::new(kg, &self.env_cfg);
            let mut pol = ModelPolicy::new(&self.gen, scene_of(kg), r);
            let mut group = Group {
                relation: r,
                trajectories: Vec::new(),
                nu: Vec::new(),
                kappa: Vec::new(),
                demo_nu: Vec::new(),
                demo_kappa: Vec::new(),
            };
            for q in qs {
                for _ in 0..self.cfg.rollouts {
                    let t = env.rollout(&mut pol, &Query::from_triplet(*q), &mut self.rng, Sampling::Sample)?;
                    if uses_rel {
                        group.nu.push(self.disc.relation_embedding(&t.relations()));
                    }
                    if uses_ent {
                        let z = pol.path_features(&t.entities(), &t.relations());
                        group.kappa.push(entity_path_embedding(&z, slots));
                    }
                    group.trajectories.push(t);
                }
            }
            if mode != RewardMode::ZeroOne {
                let demos = self.demos.get(self.data.kg, r, n, self.cfg.max_steps)?.to_vec();
                if demos.is_empty() {
                    debug!("no demonstrations for relation {}", self.data.kg.relation_name(r));
                } else {
                    let f = self.disc.counterfactual_filter(&demos, r);
                    if f.fallback {
                        warn!("counterfactual filter kept nothing for {}; using all demonstrations", self.data.kg.relation_name(r));
                    }
                    for &i in &f.kept {
                        let d = &demos[i];
                        if uses_rel {
                            group.demo_nu.push(self.disc.relation_embedding(&d.relations));
                        }
                        if uses_ent {
                            let z = pol.path_features(&d.entities, &d.relations);
                            group.demo_kappa.push(entity_path_embedding(&z, slots));
                        }
                    }
                }
            }
            groups.push(group);
        }

        let mut stats = BatchStats::default();
        if mode != RewardMode::ZeroOne {
            let (lr, le) = self.critic_update(&groups, uses_rel, uses_ent)?;
            stats.loss_r = lr;
            stats.loss_e = le;
        }

        let rewards = self.rewards(&groups, mode, uses_rel, uses_ent);
        for r in rewards.iter().flatten() {
            stats.reward_sum += r;
            stats.rewards += 1;
        }

        let gen = &self.gen;
        let (mut buf, upd) = reinforce_gradients(&gen.store, &self.baseline, &rewards, |g, i| {
            let grp = &groups[i];
            let scene = scene_of(&pruned[i].2);
            let enc = gen.encode(g, &scene, grp.relation);
            Ok(grp
                .trajectories
                .iter()
                .map(|t| gen.trajectory_log_prob(g, &enc, &scene, &t.steps))
                .collect())
        })?;
        if !upd.loss.is_finite() || !buf.is_finite() {
            return Err(self.diverged(format!("policy loss {}", upd.loss)));
        }
        self.gen_opt.apply(&mut self.gen.store, &mut buf);
        if !self.gen.store.is_finite() {
            return Err(self.diverged("generator parameters".into()));
        }
        self.baseline.update(upd.mean_reward);
        Ok(stats)
    }

    fn critic_update(&mut self, groups: &[Group], uses_rel: bool, uses_ent: bool) -> Result<(f64, f64)> {
        let n = self.cfg.n_paths;
        let d = self.cfg.d;
        let ent_width = self.disc.config.entity_slots() * self.disc.config.entity_width;
        let mut nu_p = Vec::new();
        let mut nu_o = Vec::new();
        let mut ka_p = Vec::new();
        let mut ka_o = Vec::new();
        for g in groups {
            if uses_rel && !g.demo_nu.is_empty() {
                for (i, v) in g.nu.iter().enumerate() {
                    nu_p.push(v.clone());
                    nu_o.push(g.demo_nu[i % g.demo_nu.len()].clone());
                }
            }
            if uses_ent && !g.demo_kappa.is_empty() {
                for (i, v) in g.kappa.iter().enumerate() {
                    ka_p.push(v.clone());
                    ka_o.push(g.demo_kappa[i % g.demo_kappa.len()].clone());
                }
            }
        }
        if nu_p.is_empty() && ka_p.is_empty() {
            return Ok((0.0, 0.0));
        }
        let rows = |v: &[Vec<f64>], width: usize| {
            let mut m = Matrix::zeros(v.len(), n * width);
            for (r, x) in v.iter().enumerate() {
                m.row_mut(r).copy_from_slice(package(std::slice::from_ref(x), n, width).data());
            }
            m
        };
        let (np, no) = (rows(&nu_p, d), rows(&nu_o, d));
        let (kp, ko) = (rows(&ka_p, ent_width), rows(&ka_o, ent_width));
        let (mut loss_r, mut loss_e) = (0.0, 0.0);
        for _ in 0..self.cfg.critic_steps {
            let eps: Vec<f64> = (0..np.rows()).map(|_| self.rng.gen::<f64>()).collect();
            let mut g = Graph::new();
            let mut parts = Vec::new();
            if np.rows() > 0 {
                let l = self.disc.critic_loss_relation_tape(&mut g, &np, &no, &eps, self.cfg.lambda);
                loss_r = g.value(l).item();
                parts.push(l);
            }
            if kp.rows() > 0 {
                let l = self.disc.critic_loss_entity_tape(&mut g, &kp, &ko);
                loss_e = g.value(l).item();
                parts.push(l);
            }
            let total = if parts.len() == 2 { g.add(parts[0], parts[1]) } else { parts[0] };
            if !g.value(total).item().is_finite() {
                return Err(self.diverged(format!("critic loss r={loss_r} e={loss_e}")));
            }
            let grads = g.backward(total);
            let mut buf = GradBuffer::zeros_like(&self.disc.store);
            buf.accumulate(&grads, 1.0);
            if !buf.is_finite() {
                return Err(self.diverged("critic gradient".into()));
            }
            self.disc_opt.apply(&mut self.disc.store, &mut buf);
        }
        Ok((loss_r, loss_e))
    }

    fn rewards(&mut self, groups: &[Group], mode: RewardMode, uses_rel: bool, uses_ent: bool) -> Vec<Vec<f64>> {
        if mode == RewardMode::ZeroOne {
            return groups
                .iter()
                .map(|g| {
                    g.trajectories
                        .iter()
                        .map(|t| if t.success() == Some(true) { 1.0 } else { 0.0 })
                        .collect()
                })
                .collect();
        }
        let n = self.cfg.n_paths;
        let d = self.cfg.d;
        let ent_width = self.disc.config.entity_slots() * self.disc.config.entity_width;
        let noise_nu = noise_package(&mut self.rng, n, d, 1);
        let noise_ka = noise_package(&mut self.rng, n, ent_width, 1);
        let dn_r = if uses_rel { self.disc.discriminate_relation(&noise_nu)[0] } else { 0.0 };
        let dn_e = if uses_ent { self.disc.discriminate_entity(&noise_ka)[0] } else { 0.0 };
        let score = |v: &[Vec<f64>], width: usize, rel: bool| -> Vec<f64> {
            if v.is_empty() {
                return Vec::new();
            }
            let mut m = Matrix::zeros(v.len(), n * width);
            for (r, x) in v.iter().enumerate() {
                m.row_mut(r)[..width].copy_from_slice(x);
            }
            if rel {
                self.disc.discriminate_relation(&m)
            } else {
                self.disc.discriminate_entity(&m)
            }
        };
        groups
            .iter()
            .map(|g| {
                let dr = score(&g.nu, d, true);
                let de = score(&g.kappa, ent_width, false);
                (0..g.trajectories.len())
                    .map(|i| {
                        let s = LevelScores {
                            relation: dr.get(i).copied().unwrap_or(0.0),
                            relation_noise: dn_r,
                            entity: de.get(i).copied().unwrap_or(0.0),
                            entity_noise: dn_e,
                        };
                        adaptive_reward(s, self.cfg.alpha, mode)
                    })
                    .collect()
            })
            .collect()
    }
}

fn resolve_model(cfg: &TrainConfig, data: &TrainData) -> Result<ModelConfig> {
    let f = data.features;
    for (key, want, have) in [("d_i", cfg.d_i, f.d_i()), ("d_t", cfg.d_t, f.d_t())] {
        if let Some(w) = want {
            if w != have {
                return Err(Error::config(key, format!("config says {w}, features have {have}")));
            }
        }
    }
    let d_p = data.pretrained.map_or(0, Matrix::cols);
    Ok(cfg.model(f.d_i(), f.d_t(), d_p))
}

pub fn train(cfg: TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    Trainer::new(cfg, data)?.run()
}

/// Ranks `set` with the checkpoint's generator and rules.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, set: &EvalSet, beam: usize) -> Result<(Metrics, Vec<f64>)> {
    let gen = ckpt.generator()?;
    let rules = ckpt.rule_index()?;
    evaluate(&gen, set.scene().with_rules(rules.as_ref()), &ckpt.config.env(), set.queries, &set.known, beam)
}

/// Trains the full model and each variant, then ranks `test` with each
/// run's best checkpoint. The full model's row always comes first.
pub fn run_ablation(
    cfg: &TrainConfig,
    data: &TrainData,
    test: &EvalSet,
    variants: &[Variant],
) -> Result<Vec<(String, Metrics)>> {
    let mut order = vec![Variant::Full];
    for v in variants {
        if !order.contains(v) {
            order.push(*v);
        }
    }
    let mut rows = Vec::new();
    for v in order {
        let out = train(v.apply(cfg), data)?;
        let (m, _) = evaluate_checkpoint(&out.best, test, cfg.beam)?;
        info!("{}: mrr {:.4}", v.name(), m.mrr);
        rows.push((v.name().to_owned(), m));
    }
    Ok(rows)
}
