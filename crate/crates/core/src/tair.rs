//! Topology-aware inductive entity representation.
//!
//! Entities have no learned parameters of their own. An entity starts from a
//! query-attentive average of its incident relation embeddings and is then
//! refined by `K` rounds of triplet-attentive message passing, while the
//! relation table is carried along by a per-layer linear map.
//!
//! Every operation exists twice: a direct per-entity form on plain matrices,
//! and a batched form on the autodiff tape ([`encode_tape`]) used for
//! training. The two agree to rounding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::kg::{EntityId, MultiModalKG, RelationId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{sigmoid, softmax, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TairConfig {
    pub d: usize,
    pub layers: usize,
    /// Weight incident relations by their affinity to the query relation.
    pub attentive: bool,
    /// Use the neighbour's state in messages instead of the entity's own.
    pub neighbor_state: bool,
}

impl Default for TairConfig {
    fn default() -> Self {
        Self {
            d: 200,
            layers: 3,
            attentive: true,
            neighbor_state: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TairLayer {
    pub w_self: ParamId,
    pub w_in: ParamId,
    pub w_out: ParamId,
    /// `4d x d` projection of `[h_i, h_j, u_r, u_rq]`.
    pub w1: ParamId,
    pub w2: ParamId,
    pub b: ParamId,
    pub w_r: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TairParams {
    pub config: TairConfig,
    /// Layer-0 relation table, `|R| x d`.
    pub table: ParamId,
    pub w_i: ParamId,
    pub w_o: ParamId,
    pub layers: Vec<TairLayer>,
}

impl TairParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: TairConfig,
        n_relations: usize,
        rng: &mut R,
    ) -> Self {
        let d = config.d;
        let bound = 1.0 / (d as f64).sqrt();
        let mut add = |store: &mut ParamStore, name: String, r: usize, c: usize| {
            store.add(name, Matrix::uniform(r, c, bound, rng))
        };
        let table = add(store, "tair.table".into(), n_relations, d);
        let w_i = add(store, "tair.w_i".into(), d, d);
        let w_o = add(store, "tair.w_o".into(), d, d);
        let layers = (0..config.layers)
            .map(|k| TairLayer {
                w_self: add(store, format!("tair.{k}.w_self"), d, d),
                w_in: add(store, format!("tair.{k}.w_in"), d, d),
                w_out: add(store, format!("tair.{k}.w_out"), d, d),
                w1: add(store, format!("tair.{k}.w1"), 4 * d, d),
                w2: add(store, format!("tair.{k}.w2"), d, 1),
                b: add(store, format!("tair.{k}.b"), 1, 1),
                w_r: add(store, format!("tair.{k}.w_r"), d, d),
            })
            .collect();
        Self {
            config,
            table,
            w_i,
            w_o,
            layers,
        }
    }
}

/// Softmax of `u_r · u_rq` over a multiset of relations.
pub fn relation_query_attention(
    neighbors: &[RelationId],
    r_q: RelationId,
    table: &Matrix,
) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(Error::Empty("neighbour relation list"));
    }
    let uq = table.row(r_q.index());
    let scores: Vec<f64> = neighbors
        .iter()
        .map(|r| dot(table.row(r.index()), uq))
        .collect();
    Ok(softmax(&scores))
}

/// Initial state of one entity: the (optionally attention-weighted) mean of
/// `u_r W_i` over incoming and `u_r W_o` over outgoing relations. Entities
/// with no edges start at zero.
pub fn init_entity(
    kg: &MultiModalKG,
    e: EntityId,
    r_q: RelationId,
    table: &Matrix,
    w_i: &Matrix,
    w_o: &Matrix,
    attentive: bool,
) -> Result<Matrix> {
    let d = table.cols();
    let incoming: Vec<RelationId> = kg.incoming(e)?.iter().map(|&(r, _)| r).collect();
    let outgoing: Vec<RelationId> = kg.outgoing(e)?.iter().map(|&(r, _)| r).collect();
    let total = incoming.len() + outgoing.len();
    if total == 0 {
        return Ok(Matrix::zeros(1, d));
    }
    let all: Vec<RelationId> = incoming.iter().chain(&outgoing).copied().collect();
    let alpha = if attentive {
        relation_query_attention(&all, r_q, table)?
    } else {
        vec![1.0; total]
    };
    let mut acc = Matrix::zeros(1, d);
    for (k, r) in all.iter().enumerate() {
        let w = if k < incoming.len() { w_i } else { w_o };
        let u = Matrix::row_vector(table.row(r.index()).to_vec());
        acc.add_assign(&u.matmul(w).scale(alpha[k]));
    }
    Ok(acc.scale(1.0 / total as f64))
}

/// Weights of one message-passing layer, read out of a store.
#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub w_self: Matrix,
    pub w_in: Matrix,
    pub w_out: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
    pub b: f64,
    pub w_r: Matrix,
}

impl LayerWeights {
    pub fn from_store(store: &ParamStore, layer: &TairLayer) -> Self {
        Self {
            w_self: store.get(layer.w_self).clone(),
            w_in: store.get(layer.w_in).clone(),
            w_out: store.get(layer.w_out).clone(),
            w1: store.get(layer.w1).clone(),
            w2: store.get(layer.w2).clone(),
            b: store.get(layer.b).item(),
            w_r: store.get(layer.w_r).clone(),
        }
    }
}

/// `σ(σ([h_i, h_j, u_r, u_rq] W1) W2 + b)`.
pub fn triplet_attention(h_i: &[f64], h_j: &[f64], u_r: &[f64], u_rq: &[f64], w: &LayerWeights) -> f64 {
    let c: Vec<f64> = h_i.iter().chain(h_j).chain(u_r).chain(u_rq).copied().collect();
    let hidden = Matrix::row_vector(c).matmul(&w.w1).map(sigmoid);
    sigmoid(hidden.matmul(&w.w2).item() + w.b)
}

/// One message-passing layer over every entity.
pub fn gnn_layer(
    kg: &MultiModalKG,
    states: &Matrix,
    table: &Matrix,
    r_q: RelationId,
    w: &LayerWeights,
    neighbor_state: bool,
) -> Matrix {
    let d = states.cols();
    let u_rq = table.row(r_q.index());
    let mut out = Matrix::zeros(states.rows(), d);
    for e in kg.entities() {
        let h_i = states.row(e.index());
        let mut pre = Matrix::row_vector(h_i.to_vec()).matmul(&w.w_self);
        let directions = [(kg.in_edges(e), &w.w_in), (kg.out_edges(e), &w.w_out)];
        for (edges, proj) in directions {
            for &(r, j) in edges {
                let h_j = states.row(j.index());
                let u_r = table.row(r.index());
                let alpha = triplet_attention(h_i, h_j, u_r, u_rq, w);
                let src = if neighbor_state { h_j } else { h_i };
                let msg: Vec<f64> = src.iter().zip(u_r).map(|(a, b)| a * b).collect();
                pre.add_assign(&Matrix::row_vector(msg).matmul(proj).scale(alpha));
            }
        }
        out.row_mut(e.index())
            .iter_mut()
            .zip(pre.data())
            .for_each(|(o, x)| *o = x.tanh());
    }
    out
}

/// `u_r^k = u_r^{k-1} W_r` for every relation.
pub fn update_relations(table: &Matrix, w_r: &Matrix) -> Matrix {
    table.matmul(w_r)
}

/// Full encoder on plain matrices: initialization followed by every layer.
pub fn encode(
    kg: &MultiModalKG,
    r_q: RelationId,
    store: &ParamStore,
    params: &TairParams,
) -> Result<(Matrix, Matrix)> {
    let mut table = store.get(params.table).clone();
    let w_i = store.get(params.w_i);
    let w_o = store.get(params.w_o);
    let mut states = Matrix::zeros(kg.num_entities(), params.config.d);
    for e in kg.entities() {
        let h = init_entity(kg, e, r_q, &table, w_i, w_o, params.config.attentive)?;
        states.row_mut(e.index()).copy_from_slice(h.data());
    }
    for layer in &params.layers {
        let w = LayerWeights::from_store(store, layer);
        states = gnn_layer(kg, &states, &table, r_q, &w, params.config.neighbor_state);
        table = update_relations(&table, &w.w_r);
    }
    Ok((states, table))
}

/// Tape handles of an encoding: entity states `n x d` and relation table
/// `|R| x d` after the last layer.
#[derive(Clone, Copy, Debug)]
pub struct Encoding {
    pub entities: Var,
    pub relations: Var,
}

/// Edge lists shared by initialization and every layer. In-edges come first.
struct Incidence {
    entity: Vec<usize>,
    other: Vec<usize>,
    relation: Vec<usize>,
    n_in: usize,
    inv_degree: Matrix,
}

impl Incidence {
    fn new(kg: &MultiModalKG) -> Self {
        let mut entity = Vec::new();
        let mut other = Vec::new();
        let mut relation = Vec::new();
        for e in kg.entities() {
            for &(r, h) in kg.in_edges(e) {
                entity.push(e.index());
                other.push(h.index());
                relation.push(r.index());
            }
        }
        let n_in = entity.len();
        for e in kg.entities() {
            for &(r, t) in kg.out_edges(e) {
                entity.push(e.index());
                other.push(t.index());
                relation.push(r.index());
            }
        }
        let mut degree = vec![0usize; kg.num_entities()];
        for &e in &entity {
            degree[e] += 1;
        }
        let inv_degree = Matrix::column_vector(
            degree
                .iter()
                .map(|&k| if k == 0 { 0.0 } else { 1.0 / k as f64 })
                .collect(),
        );
        Self {
            entity,
            other,
            relation,
            n_in,
            inv_degree,
        }
    }

    fn n_out(&self) -> usize {
        self.entity.len() - self.n_in
    }
}

/// Batched encoder on the tape.
pub fn encode_tape(
    g: &mut Graph,
    store: &ParamStore,
    params: &TairParams,
    kg: &MultiModalKG,
    r_q: RelationId,
) -> Encoding {
    let inc = Incidence::new(kg);
    let n = kg.num_entities();
    let d = params.config.d;
    let mut u = g.param(store, params.table);

    let ur = g.gather_rows(u, &inc.relation);
    let weighted = if params.config.attentive {
        let uq = g.row(u, r_q.index());
        let uq_t = g.transpose(uq);
        let scores = g.matmul(ur, uq_t);
        let alpha = g.segment_softmax(scores, &inc.entity, n);
        g.mul_col(ur, alpha)
    } else {
        ur
    };
    let w_i = g.param(store, params.w_i);
    let w_o = g.param(store, params.w_o);
    let h = directional(g, weighted, &inc, w_i, w_o);
    let summed = g.scatter_rows(h, &inc.entity, n);
    let inv = g.constant(inc.inv_degree.clone());
    let mut states = g.mul_col(summed, inv);

    for layer in &params.layers {
        let hi = g.gather_rows(states, &inc.entity);
        let hj = g.gather_rows(states, &inc.other);
        let ur = g.gather_rows(u, &inc.relation);
        let uq = g.row(u, r_q.index());

        let w1 = g.param(store, layer.w1);
        let blocks: Vec<Var> = (0..4).map(|k| g.slice_rows(w1, k * d, d)).collect();
        let a = g.matmul(hi, blocks[0]);
        let b = g.matmul(hj, blocks[1]);
        let c = g.matmul(ur, blocks[2]);
        let q = g.matmul(uq, blocks[3]);
        let ab = g.add(a, b);
        let abc = g.add(ab, c);
        let pre = g.add_row(abc, q);
        let hidden = g.sigmoid(pre);
        let w2 = g.param(store, layer.w2);
        let bias = g.param(store, layer.b);
        let logit = g.matmul(hidden, w2);
        let logit = g.add_row(logit, bias);
        let alpha = g.sigmoid(logit);

        let src = if params.config.neighbor_state { hj } else { hi };
        let msg = g.mul(src, ur);
        let msg = g.mul_col(msg, alpha);
        let w_in = g.param(store, layer.w_in);
        let w_out = g.param(store, layer.w_out);
        let msgs = directional(g, msg, &inc, w_in, w_out);
        let agg = g.scatter_rows(msgs, &inc.entity, n);
        let w_self = g.param(store, layer.w_self);
        let own = g.matmul(states, w_self);
        let total = g.add(own, agg);
        states = g.tanh(total);

        let w_r = g.param(store, layer.w_r);
        u = g.matmul(u, w_r);
    }
    Encoding {
        entities: states,
        relations: u,
    }
}

/// Applies `w_in` to the in-edge rows of `rows` and `w_out` to the rest.
fn directional(g: &mut Graph, rows: Var, inc: &Incidence, w_in: Var, w_out: Var) -> Var {
    let a = g.slice_rows(rows, 0, inc.n_in);
    let b = g.slice_rows(rows, inc.n_in, inc.n_out());
    let a = g.matmul(a, w_in);
    let b = g.matmul(b, w_out);
    g.concat_rows(&[a, b])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
