//! Gated multi-modal fusion of path context and entity features.
//!
//! Each fused row pairs a context vector `y = [b; h; u_rq]` (history
//! encoding, structural entity representation, query relation) with an
//! auxiliary vector `x = [f_t W_t; f_i W_i]` built from text and image
//! features. Bilinear pooling, a filtration gate and a row-softmax attention
//! map mix the two, and a final self-gate damps low-magnitude components.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UganConfig {
    /// Width of entity and relation representations.
    pub d: usize,
    /// History (recurrent state) width.
    pub d_s: usize,
    /// Bilinear pooling width.
    pub j: usize,
    pub d_i: usize,
    pub d_t: usize,
    /// Width of an optional pretrained entity table appended to the context.
    pub d_p: usize,
}

impl UganConfig {
    /// Each modality is projected to half of the auxiliary width.
    pub fn half(&self) -> usize {
        (self.d / 2).max(1)
    }

    pub fn d_x(&self) -> usize {
        2 * self.half()
    }

    pub fn d_y(&self) -> usize {
        self.d_s + 2 * self.d + self.d_p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UganParams {
    pub config: UganConfig,
    pub lstm_wx: ParamId,
    pub lstm_wh: ParamId,
    pub lstm_b: ParamId,
    pub w_t: ParamId,
    pub w_i: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_kl: ParamId,
    pub w_ql: ParamId,
    pub w_vr: ParamId,
    pub w_qr: ParamId,
    pub w_m: ParamId,
    pub w_gl: ParamId,
}

impl UganParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: UganConfig, rng: &mut R) -> Self {
        let c = &config;
        let mut add = |name: &str, r: usize, cols: usize| {
            let bound = (3.0 / r as f64).sqrt();
            store.add(format!("ugan.{name}"), Matrix::uniform(r, cols, bound, rng))
        };
        let gates = 4 * c.d_s;
        let lstm_wx = add("lstm_wx", c.d, gates);
        let lstm_wh = add("lstm_wh", c.d_s, gates);
        let lstm_b = add("lstm_b", 1, gates);
        let w_t = add("w_t", c.d_t, c.half());
        let w_i = add("w_i", c.d_i, c.half());
        let w_q = add("w_q", c.d_x(), c.d);
        let w_k = add("w_k", c.d_y(), c.d);
        let w_v = add("w_v", c.d_y(), c.d);
        let w_kl = add("w_kl", c.d, c.j);
        let w_ql = add("w_ql", c.d, c.j);
        let w_vr = add("w_vr", c.d, c.j);
        let w_qr = add("w_qr", c.d, c.j);
        let w_m = add("w_m", c.j, c.d);
        let w_gl = add("w_gl", c.d, 1);
        Self {
            config,
            lstm_wx,
            lstm_wh,
            lstm_b,
            w_t,
            w_i,
            w_q,
            w_k,
            w_v,
            w_kl,
            w_ql,
            w_vr,
            w_qr,
            w_m,
            w_gl,
        }
    }
}

/// One recurrent cell step; gate order is input, forget, cell, output.
pub fn lstm_step(
    g: &mut Graph,
    store: &ParamStore,
    p: &UganParams,
    x: Var,
    h: Var,
    c: Var,
) -> (Var, Var) {
    let ds = p.config.d_s;
    let wx = g.param(store, p.lstm_wx);
    let wh = g.param(store, p.lstm_wh);
    let b = g.param(store, p.lstm_b);
    let a = g.matmul(x, wx);
    let r = g.matmul(h, wh);
    let z = g.add(a, r);
    let z = g.add_row(z, b);
    let i = g.slice_cols(z, 0, ds);
    let f = g.slice_cols(z, ds, ds);
    let cand = g.slice_cols(z, 2 * ds, ds);
    let o = g.slice_cols(z, 3 * ds, ds);
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c);
    let write = g.mul(i, cand);
    let c = g.add(keep, write);
    let tc = g.tanh(c);
    let h = g.mul(o, tc);
    (h, c)
}

/// Runs the cell over the rows of `tokens` from a zero state and returns the
/// hidden state after every token.
pub fn encode_history_tape(
    g: &mut Graph,
    store: &ParamStore,
    p: &UganParams,
    tokens: Var,
) -> Vec<Var> {
    let ds = p.config.d_s;
    let mut h = g.constant(Matrix::zeros(1, ds));
    let mut c = g.constant(Matrix::zeros(1, ds));
    let n = g.value(tokens).rows();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let x = g.row(tokens, k);
        (h, c) = lstm_step(g, store, p, x, h, c);
        out.push(h);
    }
    out
}

/// History vector of an interleaved `e_s, r_1, e_1, …` token sequence.
pub fn encode_history(tokens: &Matrix, store: &ParamStore, p: &UganParams) -> Result<Matrix> {
    if tokens.rows() == 0 {
        return Err(Error::Empty("history token sequence"));
    }
    let mut g = Graph::new();
    let t = g.constant(tokens.clone());
    let states = encode_history_tape(&mut g, store, p, t);
    Ok(g.value(*states.last().expect("non-empty")).clone())
}

/// Auxiliary rows `[f_t W_t; f_i W_i]`.
pub fn aux_rows(g: &mut Graph, store: &ParamStore, p: &UganParams, text: Var, image: Var) -> Var {
    let wt = g.param(store, p.w_t);
    let wi = g.param(store, p.w_i);
    let t = g.matmul(text, wt);
    let i = g.matmul(image, wi);
    g.concat_cols(&[t, i])
}

/// Returns `(V̂, B^r)`, both `m x j`. Every row of `V̂` holds the same
/// convex combination of the rows of `B^r`, weighted by a softmax over
/// `G_s K W_g`.
pub fn attention_fusion_tape(
    g: &mut Graph,
    store: &ParamStore,
    p: &UganParams,
    x: Var,
    y: Var,
) -> (Var, Var) {
    let wq = g.param(store, p.w_q);
    let wk = g.param(store, p.w_k);
    let wv = g.param(store, p.w_v);
    let q = g.matmul(x, wq);
    let k = g.matmul(y, wk);
    let v = g.matmul(y, wv);

    let wkl = g.param(store, p.w_kl);
    let wql = g.param(store, p.w_ql);
    let wvr = g.param(store, p.w_vr);
    let wqr = g.param(store, p.w_qr);
    let kl = g.matmul(k, wkl);
    let ql = g.matmul(q, wql);
    let b_l = g.mul(kl, ql);
    let vr = g.matmul(v, wvr);
    let qr = g.matmul(q, wqr);
    let b_r = g.mul(vr, qr);

    let wm = g.param(store, p.w_m);
    let gate = g.matmul(b_l, wm);
    let gate = g.sigmoid(gate);
    let gk = g.mul(gate, k);
    let inv = g.one_minus(gate);
    let gq = g.mul(inv, q);
    let gq_t = g.transpose(gq);
    let scores = g.matmul(gk, gq_t);
    let attn = g.softmax_rows(scores);

    let ctx = g.matmul(attn, k);
    let wgl = g.param(store, p.w_gl);
    let score = g.matmul(ctx, wgl);
    let score = g.transpose(score);
    let weight = g.softmax_rows(score);
    let weight = g.transpose(weight);
    let weighted = g.mul_col(b_r, weight);
    let m = g.value(x).rows();
    let ones = g.constant(Matrix::filled(m, m, 1.0));
    let v_hat = g.matmul(ones, weighted);
    (v_hat, b_r)
}

/// `σ(B^r ⊙ V̂) ⊙ (B^r ⊙ V̂)`.
pub fn irrelevance_filtration_tape(g: &mut Graph, b_r: Var, v_hat: Var) -> Var {
    let u = g.mul(b_r, v_hat);
    let gate = g.sigmoid(u);
    g.mul(gate, u)
}

/// Fused rows for context `y` and auxiliary `x`. With fusion disabled the
/// two are simply concatenated.
pub fn fuse_tape(
    g: &mut Graph,
    store: &ParamStore,
    p: &UganParams,
    x: Var,
    y: Var,
    enabled: bool,
) -> Var {
    if enabled {
        let (v_hat, b_r) = attention_fusion_tape(g, store, p, x, y);
        irrelevance_filtration_tape(g, b_r, v_hat)
    } else {
        g.concat_cols(&[y, x])
    }
}

fn check_rows(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.rows() != y.rows() || x.rows() == 0 {
        return Err(Error::Shape(format!(
            "auxiliary group has {} rows, context group has {}",
            x.rows(),
            y.rows()
        )));
    }
    Ok(())
}

pub fn attention_fusion(
    x: &Matrix,
    y: &Matrix,
    store: &ParamStore,
    p: &UganParams,
) -> Result<(Matrix, Matrix)> {
    check_rows(x, y)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let (v, b) = attention_fusion_tape(&mut g, store, p, xv, yv);
    Ok((g.value(v).clone(), g.value(b).clone()))
}

pub fn irrelevance_filtration(b_r: &Matrix, v_hat: &Matrix) -> Result<Matrix> {
    if b_r.shape() != v_hat.shape() {
        return Err(Error::Shape(format!(
            "B^r is {:?}, V̂ is {:?}",
            b_r.shape(),
            v_hat.shape()
        )));
    }
    let mut g = Graph::new();
    let b = g.constant(b_r.clone());
    let v = g.constant(v_hat.clone());
    let z = irrelevance_filtration_tape(&mut g, b, v);
    Ok(g.value(z).clone())
}

/// Fused features `Z` for raw text/image rows and context rows.
pub fn fuse(
    text: &Matrix,
    image: &Matrix,
    context: &Matrix,
    store: &ParamStore,
    p: &UganParams,
    enabled: bool,
) -> Result<Matrix> {
    if text.rows() != image.rows() {
        return Err(Error::Shape("text and image row counts differ".into()));
    }
    if text.cols() != p.config.d_t || image.cols() != p.config.d_i {
        return Err(Error::FeatureDims(format!(
            "expected d_t={} d_i={}, got {} and {}",
            p.config.d_t,
            p.config.d_i,
            text.cols(),
            image.cols()
        )));
    }
    let mut g = Graph::new();
    let t = g.constant(text.clone());
    let i = g.constant(image.clone());
    let x = aux_rows(&mut g, store, p, t, i);
    check_rows(g.value(x), context)?;
    let y = g.constant(context.clone());
    let z = fuse_tape(&mut g, store, p, x, y, enabled);
    Ok(g.value(z).clone())
}
