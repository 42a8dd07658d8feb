//! The generator: topology-aware entity encoder, gated fusion over the
//! reasoning path, rule-guided augmentation and the action-scoring head.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::env::{Action, Policy, ReasonerState};
use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::kg::{EdgeMask, EntityId, MultiModalKG, RelationId, Triplet};
use crate::params::{ParamId, ParamStore};
use crate::policy::{score_actions_tape, PolicyParams};
use crate::rules::{augment_actions, select_additional_relations, RuleIndex, SelectorParams};
use crate::tair::{encode_tape, TairConfig, TairParams};
use crate::tensor::Matrix;
use crate::ugan::{aux_rows, encode_history_tape, fuse_tape, UganConfig, UganParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub d_s: usize,
    pub j: usize,
    pub d_i: usize,
    pub d_t: usize,
    /// Width of an optional pretrained entity table; 0 when absent.
    pub d_p: usize,
    pub layers: usize,
    pub attentive: bool,
    pub neighbor_state: bool,
    pub tair_on: bool,
    pub ugan_on: bool,
    pub augmentation_on: bool,
    /// Relations chosen for augmentation per step.
    pub extra_relations: usize,
    pub cap_per_relation: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            d_s: 32,
            j: 32,
            d_i: 16,
            d_t: 16,
            d_p: 0,
            layers: 3,
            attentive: true,
            neighbor_state: false,
            tair_on: true,
            ugan_on: true,
            augmentation_on: true,
            extra_relations: 3,
            cap_per_relation: 10,
        }
    }
}

impl ModelConfig {
    pub fn tair(&self) -> TairConfig {
        TairConfig {
            d: self.d,
            layers: self.layers,
            attentive: self.attentive,
            neighbor_state: self.neighbor_state,
        }
    }

    pub fn ugan(&self) -> UganConfig {
        UganConfig {
            d: self.d,
            d_s: self.d_s,
            j: self.j,
            d_i: self.d_i,
            d_t: self.d_t,
            d_p: self.d_p,
        }
    }

    /// Width of a fused state row.
    pub fn z_dim(&self) -> usize {
        let u = self.ugan();
        if self.ugan_on {
            u.j
        } else {
            u.d_y() + u.d_x()
        }
    }
}

/// Everything the generator reads but does not own.
#[derive(Clone, Copy, Debug)]
pub struct Scene<'a> {
    pub kg: &'a MultiModalKG,
    pub features: &'a FeatureStore,
    pub pretrained: Option<&'a Matrix>,
    pub rules: Option<&'a RuleIndex>,
}

impl<'a> Scene<'a> {
    pub fn new(kg: &'a MultiModalKG, features: &'a FeatureStore) -> Self {
        Self {
            kg,
            features,
            pretrained: None,
            rules: None,
        }
    }

    pub fn with_rules(mut self, rules: Option<&'a RuleIndex>) -> Self {
        self.rules = rules;
        self
    }

    pub fn with_pretrained(mut self, table: Option<&'a Matrix>) -> Self {
        self.pretrained = table;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub tair: TairParams,
    pub ugan: UganParams,
    pub policy: PolicyParams,
    pub selector: SelectorParams,
    /// Feature projection used for entity vectors when the encoder is off.
    pub entity_proj: ParamId,
    pub n_relations: usize,
}

/// Tape handles shared by every state of one query relation.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    entities: Option<Var>,
    /// Relation rows followed by the STOP row.
    relations: Var,
    query: RelationId,
    n_relations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct PathOut {
    /// Fused rows, one per path entity.
    pub z_rows: Var,
    /// Context row of the last entity.
    pub y_last: Var,
    /// Fused row of the last entity.
    pub z: Var,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, n_relations: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let tair = TairParams::new(&mut store, config.tair(), n_relations, rng);
        let ugan = UganParams::new(&mut store, config.ugan(), rng);
        let policy = PolicyParams::new(&mut store, config.z_dim(), 2 * config.d, config.d, rng);
        let selector = SelectorParams::new(&mut store, config.ugan().d_y(), config.d, rng);
        let raw = config.d_t + config.d_i;
        let entity_proj = store.add(
            "policy.entity_proj",
            Matrix::uniform(raw, config.d, 1.0 / (raw as f64).sqrt(), rng),
        );
        Self {
            config,
            store,
            tair,
            ugan,
            policy,
            selector,
            entity_proj,
            n_relations,
        }
    }

    pub fn check_scene(&self, scene: &Scene) -> Result<()> {
        let kg = scene.kg;
        if kg.num_relations() != self.n_relations {
            return Err(Error::Shape(format!(
                "model has {} relations, graph has {}",
                self.n_relations,
                kg.num_relations()
            )));
        }
        let f = scene.features;
        if f.len() != kg.num_entities() || f.d_i() != self.config.d_i || f.d_t() != self.config.d_t {
            return Err(Error::FeatureDims(format!(
                "model expects d_i={} d_t={} for {} entities, store has d_i={} d_t={} for {}",
                self.config.d_i,
                self.config.d_t,
                kg.num_entities(),
                f.d_i(),
                f.d_t(),
                f.len()
            )));
        }
        match (scene.pretrained, self.config.d_p) {
            (None, 0) => Ok(()),
            (Some(t), dp) if dp > 0 && t.cols() == dp && t.rows() == kg.num_entities() => Ok(()),
            (t, dp) => Err(Error::FeatureDims(format!(
                "pretrained table {:?} does not match d_p={dp}",
                t.map(Matrix::shape)
            ))),
        }
    }

    pub fn encode(&self, g: &mut Graph, scene: &Scene, r_q: RelationId) -> Encoded {
        let (entities, rel) = if self.config.tair_on {
            let enc = encode_tape(g, &self.store, &self.tair, scene.kg, r_q);
            (Some(enc.entities), enc.relations)
        } else {
            (None, g.param(&self.store, self.tair.table))
        };
        let stop = g.param(&self.store, self.policy.stop);
        Encoded {
            entities,
            relations: g.concat_rows(&[rel, stop]),
            query: r_q,
            n_relations: self.n_relations,
        }
    }

    pub fn entity_rows(&self, g: &mut Graph, enc: &Encoded, scene: &Scene, ids: &[EntityId]) -> Var {
        match enc.entities {
            Some(h) => g.gather_rows(h, &ids.iter().map(|e| e.index()).collect::<Vec<_>>()),
            None => {
                let t = scene.features.text_matrix(ids);
                let i = scene.features.image_matrix(ids);
                let x = g.constant(Matrix::concat_cols(&[&t, &i]));
                let w = g.param(&self.store, self.entity_proj);
                g.matmul(x, w)
            }
        }
    }

    pub fn relation_rows(&self, g: &mut Graph, enc: &Encoded, rels: &[RelationId]) -> Var {
        let idx: Vec<usize> = rels
            .iter()
            .map(|r| if r.is_stop() { enc.n_relations } else { r.index() })
            .collect();
        g.gather_rows(enc.relations, &idx)
    }

    /// Fused features for the path `entities[0], relations[0], entities[1], …`.
    pub fn forward_path(
        &self,
        g: &mut Graph,
        enc: &Encoded,
        scene: &Scene,
        entities: &[EntityId],
        relations: &[RelationId],
    ) -> PathOut {
        let m = entities.len();
        assert!(m >= 1 && relations.len() + 1 == m, "path shape");
        let ent = self.entity_rows(g, enc, scene, entities);
        let tokens = if m > 1 {
            let rel = self.relation_rows(g, enc, relations);
            let all = g.concat_rows(&[ent, rel]);
            let mut order = Vec::with_capacity(2 * m - 1);
            for i in 0..m {
                order.push(i);
                if i + 1 < m {
                    order.push(m + i);
                }
            }
            g.gather_rows(all, &order)
        } else {
            ent
        };
        let hidden = encode_history_tape(g, &self.store, &self.ugan, tokens);
        let at_entities: Vec<Var> = hidden.into_iter().step_by(2).collect();
        let b = g.concat_rows(&at_entities);
        let uq = g.gather_rows(enc.relations, &vec![enc.query.index(); m]);
        let mut parts = vec![b, ent, uq];
        if let Some(table) = scene.pretrained {
            let rows = table.gather_rows(&entities.iter().map(|e| e.index()).collect::<Vec<_>>());
            parts.push(g.constant(rows));
        }
        let y = g.concat_cols(&parts);
        let text = g.constant(scene.features.text_matrix(entities));
        let image = g.constant(scene.features.image_matrix(entities));
        let x = aux_rows(g, &self.store, &self.ugan, text, image);
        let z_rows = fuse_tape(g, &self.store, &self.ugan, x, y, self.config.ugan_on);
        PathOut {
            z_rows,
            y_last: g.row(y, m - 1),
            z: g.row(z_rows, m - 1),
        }
    }

    /// Log-probabilities (`1×k`) of `actions` given a fused state row.
    pub fn action_log_probs(&self, g: &mut Graph, enc: &Encoded, scene: &Scene, z: Var, actions: &[Action]) -> Var {
        let rels: Vec<RelationId> = actions.iter().map(|a| a.relation).collect();
        let ents: Vec<EntityId> = actions.iter().map(|a| a.entity).collect();
        let r = self.relation_rows(g, enc, &rels);
        let e = self.entity_rows(g, enc, scene, &ents);
        let a = g.concat_cols(&[r, e]);
        score_actions_tape(g, &self.store, &self.policy, z, a)
    }

    /// Summed log-probability of a recorded trajectory's chosen actions.
    pub fn trajectory_log_prob(
        &self,
        g: &mut Graph,
        enc: &Encoded,
        scene: &Scene,
        steps: &[crate::env::Step],
    ) -> Var {
        let mut terms = Vec::with_capacity(steps.len());
        for s in steps {
            let out = self.forward_path(g, enc, scene, &s.state.path_entities(), &s.state.path_relations());
            let lp = self.action_log_probs(g, enc, scene, out.z, &s.actions);
            terms.push(g.slice_cols(lp, s.chosen, 1));
        }
        let row = g.concat_cols(&terms);
        g.sum(row)
    }
}

/// A [`Policy`] backed by the generator for one query relation. The graph
/// encoding is computed once; per-state work is rewound after use.
pub struct ModelPolicy<'a> {
    gen: &'a Generator,
    scene: Scene<'a>,
    graph: Graph,
    enc: Encoded,
    base: usize,
    relation_table: Matrix,
    cached: Option<(ReasonerState, PathOut, usize)>,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(gen: &'a Generator, scene: Scene<'a>, r_q: RelationId) -> Self {
        let mut graph = Graph::new();
        let enc = gen.encode(&mut graph, &scene, r_q);
        let full = graph.value(enc.relations);
        let relation_table = full.gather_rows(&(0..gen.n_relations).collect::<Vec<_>>());
        let base = graph.mark();
        Self {
            gen,
            scene,
            graph,
            enc,
            base,
            relation_table,
            cached: None,
        }
    }

    pub fn query(&self) -> RelationId {
        self.enc.query
    }

    fn state_out(&mut self, state: &ReasonerState) -> Result<(PathOut, usize)> {
        if state.query != self.enc.query {
            return Err(Error::Shape(format!(
                "policy encodes relation {}, state asks {}",
                self.enc.query, state.query
            )));
        }
        if let Some((s, out, mark)) = &self.cached {
            if s == state {
                return Ok((*out, *mark));
            }
        }
        self.graph.rewind(self.base);
        let out = self.gen.forward_path(
            &mut self.graph,
            &self.enc,
            &self.scene,
            &state.path_entities(),
            &state.path_relations(),
        );
        let mark = self.graph.mark();
        self.cached = Some((state.clone(), out, mark));
        Ok((out, mark))
    }

    /// Fused rows for an explicit path.
    pub fn path_features(&mut self, entities: &[EntityId], relations: &[RelationId]) -> Matrix {
        self.cached = None;
        self.graph.rewind(self.base);
        let out = self.gen.forward_path(&mut self.graph, &self.enc, &self.scene, entities, relations);
        let z = self.graph.value(out.z_rows).clone();
        self.graph.rewind(self.base);
        z
    }
}

impl Policy for ModelPolicy<'_> {
    fn augmented(&mut self, state: &ReasonerState, mask: EdgeMask) -> Result<Vec<(RelationId, EntityId)>> {
        let cfg = &self.gen.config;
        let Some(rules) = self.scene.rules else {
            return Ok(Vec::new());
        };
        if !cfg.augmentation_on || cfg.extra_relations == 0 || rules.is_empty() {
            return Ok(Vec::new());
        }
        let (out, _) = self.state_out(state)?;
        let y = self.graph.value(out.y_last).clone();
        let selected = select_additional_relations(
            &y,
            &self.relation_table,
            &self.gen.store,
            &self.gen.selector,
            cfg.extra_relations,
        );
        let kg = self.scene.kg;
        let originals: HashSet<(RelationId, EntityId)> = kg
            .out_edges(state.entity)
            .iter()
            .copied()
            .filter(|&(r, e)| !mask.hides(Triplet::new(state.entity, r, e)))
            .collect();
        Ok(augment_actions(
            kg,
            state.entity,
            &selected,
            rules,
            cfg.cap_per_relation,
            &originals,
            mask,
        ))
    }

    fn probabilities(&mut self, state: &ReasonerState, actions: &[Action]) -> Result<Vec<f64>> {
        if actions.is_empty() {
            return Err(Error::Empty("action list"));
        }
        let (out, mark) = self.state_out(state)?;
        let lp = self
            .gen
            .action_log_probs(&mut self.graph, &self.enc, &self.scene, out.z, actions);
        let probs: Vec<f64> = self.graph.value(lp).data().iter().map(|x| x.exp()).collect();
        self.graph.rewind(mark);
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("action probability".into()));
        }
        Ok(probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Env, EnvConfig, Query};
    use crate::features::synth_features;
    use crate::policy::Sampling;
    use crate::rules::{mine_rules, MiningConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            d: 4,
            d_s: 3,
            j: 5,
            d_i: 3,
            d_t: 2,
            layers: 2,
            ..ModelConfig::default()
        }
    }

    fn graph() -> MultiModalKG {
        MultiModalKG::from_named_triples([
            ("a", "r1", "b"),
            ("b", "r2", "c"),
            ("a", "rh", "c"),
            ("d", "r1", "e"),
            ("e", "r2", "f"),
            ("d", "rh", "f"),
            ("g", "r1", "h"),
            ("h", "r2", "i"),
        ])
    }

    #[test]
    fn probabilities_are_a_distribution_for_every_switch() {
        let kg = graph();
        let feats = synth_features(&kg, 1, 3, 2);
        for (tair_on, ugan_on) in [(true, true), (false, true), (true, false), (false, false)] {
            let cfg = ModelConfig { tair_on, ugan_on, ..small() };
            let gen = Generator::new(cfg, kg.num_relations(), &mut ChaCha8Rng::seed_from_u64(2));
            let scene = Scene::new(&kg, &feats);
            gen.check_scene(&scene).unwrap();
            let rq = kg.relation_id("rh").unwrap();
            let mut pol = ModelPolicy::new(&gen, scene, rq);
            let env_cfg = EnvConfig::default();
            let env = Env::new(&kg, &env_cfg);
            let q = Query::new(kg.entity_id("a").unwrap(), rq, kg.entity_id("c").unwrap());
            let t = env
                .rollout(&mut pol, &q, &mut ChaCha8Rng::seed_from_u64(0), Sampling::Sample)
                .unwrap();
            for s in &t.steps {
                let p = pol.probabilities(&s.state, &s.actions).unwrap();
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(p.iter().all(|&x| x > 0.0));
            }
        }
    }

    #[test]
    fn tape_log_prob_matches_rollout_log_prob() {
        let kg = graph();
        let feats = synth_features(&kg, 1, 3, 2);
        let gen = Generator::new(small(), kg.num_relations(), &mut ChaCha8Rng::seed_from_u64(9));
        let scene = Scene::new(&kg, &feats);
        let rq = kg.relation_id("rh").unwrap();
        let q = Query::new(kg.entity_id("g").unwrap(), rq, kg.entity_id("i").unwrap());
        let env_cfg = EnvConfig::default();
        let env = Env::new(&kg, &env_cfg);
        let t = env
            .rollout(&mut ModelPolicy::new(&gen, scene, rq), &q, &mut ChaCha8Rng::seed_from_u64(3), Sampling::Sample)
            .unwrap();
        let mut g = Graph::new();
        let enc = gen.encode(&mut g, &scene, rq);
        let lp = gen.trajectory_log_prob(&mut g, &enc, &scene, &t.steps);
        assert!((g.value(lp).item() - t.log_prob()).abs() < 1e-10);
    }

    #[test]
    fn augmentation_adds_rule_derived_tails() {
        let kg = graph();
        let feats = synth_features(&kg, 1, 3, 2);
        let rules = mine_rules(&kg, &MiningConfig { max_body_len: 2, min_support: 2, min_conf: 0.1 });
        let rh = kg.relation_id("rh").unwrap();
        assert!(!rules.rules_for(rh).is_empty());
        let cfg = ModelConfig { extra_relations: kg.num_relations(), ..small() };
        let gen = Generator::new(cfg, kg.num_relations(), &mut ChaCha8Rng::seed_from_u64(4));
        let scene = Scene::new(&kg, &feats).with_rules(Some(&rules));
        let mut pol = ModelPolicy::new(&gen, scene, rh);
        let g_ent = kg.entity_id("g").unwrap();
        let st = ReasonerState::start(&Query { source: g_ent, relation: rh, target: None });
        let aug = pol.augmented(&st, EdgeMask::NONE).unwrap();
        assert!(aug.contains(&(rh, kg.entity_id("i").unwrap())));
        let env_cfg = EnvConfig::default();
        let env = Env::new(&kg, &env_cfg);
        let acts = env.action_space(&st, &aug, EdgeMask::NONE);
        let p = pol.probabilities(&st, &acts).unwrap();
        assert_eq!(p.len(), acts.len());
    }

    #[test]
    fn scene_mismatch_is_reported() {
        let kg = graph();
        let feats = synth_features(&kg, 1, 2, 2);
        let gen = Generator::new(small(), kg.num_relations(), &mut ChaCha8Rng::seed_from_u64(4));
        assert!(gen.check_scene(&Scene::new(&kg, &feats)).is_err());
    }

    #[test]
    fn pretrained_rows_widen_the_context() {
        let kg = graph();
        let feats = synth_features(&kg, 1, 3, 2);
        let cfg = ModelConfig { d_p: 2, ugan_on: false, ..small() };
        let gen = Generator::new(cfg.clone(), kg.num_relations(), &mut ChaCha8Rng::seed_from_u64(4));
        let table = Matrix::filled(kg.num_entities(), 2, 0.5);
        let scene = Scene::new(&kg, &feats).with_pretrained(Some(&table));
        gen.check_scene(&scene).unwrap();
        let rh = kg.relation_id("rh").unwrap();
        let mut pol = ModelPolicy::new(&gen, scene, rh);
        let z = pol.path_features(&[kg.entity_id("a").unwrap()], &[]);
        assert_eq!(z.cols(), cfg.z_dim());
    }
}
