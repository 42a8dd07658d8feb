//! The reasoning MDP: states, joint action spaces, transitions, rollouts and
//! beam-search inference.
//!
//! Every episode runs for exactly `max_steps` steps; once the agent takes
//! STOP it keeps taking the STOP self-loop.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EdgeMask, EntityId, MultiModalKG, RelationId, Triplet};
use crate::policy::{sample_action, Sampling};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    Original,
    Augmented,
    Stop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub relation: RelationId,
    pub entity: EntityId,
    pub kind: ActionKind,
}

impl Action {
    pub fn stop(at: EntityId) -> Self {
        Self {
            relation: RelationId::STOP,
            entity: at,
            kind: ActionKind::Stop,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Query {
    pub source: EntityId,
    pub relation: RelationId,
    pub target: Option<EntityId>,
}

impl Query {
    pub fn new(source: EntityId, relation: RelationId, target: EntityId) -> Self {
        Self {
            source,
            relation,
            target: Some(target),
        }
    }

    pub fn from_triplet(t: Triplet) -> Self {
        Self::new(t.head, t.relation, t.tail)
    }

    /// Hides the query triplet itself (and its inverse) from the agent.
    pub fn mask(&self) -> EdgeMask {
        match self.target {
            Some(t) => EdgeMask::new(Triplet::new(self.source, self.relation, t)),
            None => EdgeMask::NONE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReasonerState {
    pub entity: EntityId,
    pub source: EntityId,
    pub query: RelationId,
    pub step: usize,
    pub history: Vec<(RelationId, EntityId)>,
}

impl ReasonerState {
    pub fn start(q: &Query) -> Self {
        Self {
            entity: q.source,
            source: q.source,
            query: q.relation,
            step: 0,
            history: Vec::new(),
        }
    }

    /// `e_s, e_1, …, e_l`.
    pub fn path_entities(&self) -> Vec<EntityId> {
        std::iter::once(self.source)
            .chain(self.history.iter().map(|&(_, e)| e))
            .collect()
    }

    pub fn path_relations(&self) -> Vec<RelationId> {
        self.history.iter().map(|&(r, _)| r).collect()
    }

    /// True when the last action was STOP.
    pub fn stopped(&self) -> bool {
        self.history.last().is_some_and(|&(r, _)| r.is_stop())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Episode length `L`.
    pub max_steps: usize,
    /// Cap on the joint action space, STOP included.
    pub max_actions: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            max_steps: 3,
            max_actions: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: ReasonerState,
    pub actions: Vec<Action>,
    pub chosen: usize,
    pub log_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub query: Query,
    pub steps: Vec<Step>,
    pub terminal: ReasonerState,
}

impl Trajectory {
    pub fn terminal_entity(&self) -> EntityId {
        self.terminal.entity
    }

    pub fn success(&self) -> Option<bool> {
        self.query.target.map(|t| t == self.terminal.entity)
    }

    pub fn log_prob(&self) -> f64 {
        self.steps.iter().map(|s| s.log_prob).sum()
    }

    pub fn relations(&self) -> Vec<RelationId> {
        self.terminal.path_relations()
    }

    pub fn entities(&self) -> Vec<EntityId> {
        self.terminal.path_entities()
    }
}

/// Action distribution over a state's legal actions.
pub trait Policy {
    /// Rule-derived candidates for `state`; none by default.
    fn augmented(&mut self, _state: &ReasonerState, _mask: EdgeMask) -> Result<Vec<(RelationId, EntityId)>> {
        Ok(Vec::new())
    }

    fn probabilities(&mut self, state: &ReasonerState, actions: &[Action]) -> Result<Vec<f64>>;
}

/// Uniform distribution over legal actions.
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformPolicy;

impl Policy for UniformPolicy {
    fn probabilities(&mut self, _: &ReasonerState, actions: &[Action]) -> Result<Vec<f64>> {
        Ok(vec![1.0 / actions.len() as f64; actions.len()])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Env<'a> {
    pub kg: &'a MultiModalKG,
    pub config: &'a EnvConfig,
}

impl<'a> Env<'a> {
    pub fn new(kg: &'a MultiModalKG, config: &'a EnvConfig) -> Self {
        Self { kg, config }
    }

    /// Originals, then augmented candidates, then STOP. After a STOP only
    /// STOP remains.
    pub fn action_space(
        &self,
        state: &ReasonerState,
        augmented: &[(RelationId, EntityId)],
        mask: EdgeMask,
    ) -> Vec<Action> {
        let stop = Action::stop(state.entity);
        if state.stopped() {
            return vec![stop];
        }
        let budget = self.config.max_actions.max(1) - 1;
        let mut actions = Vec::new();
        let mut seen = HashSet::new();
        for &(r, e) in self.kg.out_edges(state.entity) {
            if mask.hides(Triplet::new(state.entity, r, e)) {
                continue;
            }
            seen.insert((r, e));
            actions.push(Action {
                relation: r,
                entity: e,
                kind: ActionKind::Original,
            });
        }
        for &(r, e) in augmented {
            if r.is_stop() || !seen.insert((r, e)) {
                continue;
            }
            actions.push(Action {
                relation: r,
                entity: e,
                kind: ActionKind::Augmented,
            });
        }
        actions.truncate(budget);
        actions.push(stop);
        actions
    }

    pub fn step(&self, state: &ReasonerState, action: Action, legal: &[Action]) -> Result<ReasonerState> {
        if state.step >= self.config.max_steps {
            return Err(Error::IllegalAction(format!(
                "episode already at step {}",
                state.step
            )));
        }
        if !legal.contains(&action) {
            return Err(Error::IllegalAction(format!(
                "({}, {}) is not available at {}",
                action.relation, action.entity, state.entity
            )));
        }
        let mut next = state.clone();
        next.entity = action.entity;
        next.step += 1;
        next.history.push((action.relation, action.entity));
        Ok(next)
    }

    fn legal_actions<P: Policy + ?Sized>(
        &self,
        policy: &mut P,
        state: &ReasonerState,
        mask: EdgeMask,
    ) -> Result<Vec<Action>> {
        let augmented = if state.stopped() {
            Vec::new()
        } else {
            policy.augmented(state, mask)?
        };
        Ok(self.action_space(state, &augmented, mask))
    }

    pub fn rollout<P: Policy + ?Sized, R: Rng + ?Sized>(
        &self,
        policy: &mut P,
        query: &Query,
        rng: &mut R,
        mode: Sampling,
    ) -> Result<Trajectory> {
        let mask = query.mask();
        let mut state = ReasonerState::start(query);
        let mut steps = Vec::with_capacity(self.config.max_steps);
        while state.step < self.config.max_steps {
            let actions = self.legal_actions(policy, &state, mask)?;
            let probs = policy.probabilities(&state, &actions)?;
            let chosen = sample_action(&probs, rng, mode);
            let next = self.step(&state, actions[chosen], &actions)?;
            steps.push(Step {
                state,
                log_prob: probs[chosen].ln(),
                actions,
                chosen,
            });
            state = next;
        }
        Ok(Trajectory {
            query: *query,
            steps,
            terminal: state,
        })
    }

    /// Beam search by accumulated log-probability. Terminal entities are
    /// deduplicated keeping their best score and returned best first, ties
    /// broken by entity id.
    pub fn beam_infer<P: Policy + ?Sized>(
        &self,
        policy: &mut P,
        query: &Query,
        beam_width: usize,
    ) -> Result<Vec<(EntityId, f64)>> {
        let width = beam_width.max(1);
        let mask = query.mask();
        let mut beams = vec![(ReasonerState::start(query), 0.0f64)];
        for _ in 0..self.config.max_steps {
            let mut expanded = Vec::new();
            for (state, score) in &beams {
                let actions = self.legal_actions(policy, state, mask)?;
                let probs = policy.probabilities(state, &actions)?;
                for (a, p) in actions.iter().zip(&probs) {
                    let next = self.step(state, *a, &actions)?;
                    expanded.push((next, score + p.ln()));
                }
            }
            expanded.sort_by(|a, b| b.1.total_cmp(&a.1));
            expanded.truncate(width);
            beams = expanded;
        }
        Ok(rank_terminals(beams.into_iter().map(|(s, v)| (s.entity, v))))
    }
}

/// Keeps the best score per entity and sorts best first, ties by id.
pub fn rank_terminals(scored: impl IntoIterator<Item = (EntityId, f64)>) -> Vec<(EntityId, f64)> {
    let mut best: std::collections::BTreeMap<EntityId, f64> = std::collections::BTreeMap::new();
    for (e, s) in scored {
        let slot = best.entry(e).or_insert(f64::NEG_INFINITY);
        if s > *slot {
            *slot = s;
        }
    }
    let mut out: Vec<(EntityId, f64)> = best.into_iter().collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}
