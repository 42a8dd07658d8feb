//! Named parameter storage and first-order optimizers.

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    pub fn total_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Dense per-parameter gradient buffer aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Matrix>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store
                .values
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.params() {
            let slot = &mut self.grads[id.0];
            for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|m| m.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Matrix::is_finite)
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            let k = max_norm / norm;
            for m in &mut self.grads {
                m.data_mut().iter_mut().for_each(|x| *x *= k);
            }
        }
        norm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub clip: f64,
    /// Decoupled decay: every step also shrinks weights by `lr * weight_decay`.
    #[serde(default)]
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, clip: f64) -> Self {
        Self {
            kind,
            lr,
            clip,
            weight_decay: 0.0,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    /// Descends along `grads` (clipped to `self.clip`).
    pub fn apply(&mut self, store: &mut ParamStore, grads: &mut GradBuffer) {
        grads.clip(self.clip);
        if self.weight_decay > 0.0 {
            let keep = 1.0 - self.lr * self.weight_decay;
            for value in store.values.iter_mut() {
                value.data_mut().iter_mut().for_each(|w| *w *= keep);
            }
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (value, g) in store.values.iter_mut().zip(&grads.grads) {
                    for (w, d) in value.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first.len() != store.values.len() {
                    self.first = store.values.iter().map(|m| vec![0.0; m.len()]).collect();
                    self.second = self.first.clone();
                }
                self.step += 1;
                let t = self.step as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                for (i, (value, g)) in store.values.iter_mut().zip(&grads.grads).enumerate() {
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    for (k, (w, d)) in value.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[k] = BETA1 * m[k] + (1.0 - BETA1) * d;
                        v[k] = BETA2 * v[k] + (1.0 - BETA2) * d * d;
                        let mh = m[k] / c1;
                        let vh = v[k] / c2;
                        *w -= self.lr * mh / (vh.sqrt() + EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn quadratic_step(kind: OptimizerKind) -> f64 {
        let mut store = ParamStore::new();
        let p = store.add("p", Matrix::row_vector(vec![2.0, -1.0]));
        let mut opt = Optimizer::new(kind, 0.1, 5.0);
        for _ in 0..200 {
            let mut g = Graph::new();
            let x = g.param(&store, p);
            let sq = g.square(x);
            let loss = g.sum(sq);
            let grads = g.backward(loss);
            let mut buf = GradBuffer::zeros_like(&store);
            buf.accumulate(&grads, 1.0);
            opt.apply(&mut store, &mut buf);
        }
        store.get(p).norm()
    }

    #[test]
    fn optimizers_minimize_a_quadratic() {
        assert!(quadratic_step(OptimizerKind::Sgd) < 1e-6);
        assert!(quadratic_step(OptimizerKind::Adam) < 1e-2);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut store = ParamStore::new();
        let p = store.add("p", Matrix::row_vector(vec![30.0, 40.0]));
        let mut g = Graph::new();
        let x = g.param(&store, p);
        let loss = g.sum(x);
        let _ = loss;
        let sq = g.square(x);
        let l2 = g.sum(sq);
        let grads = g.backward(l2);
        let mut buf = GradBuffer::zeros_like(&store);
        buf.accumulate(&grads, 1.0);
        let before = buf.clip(5.0);
        assert!((before - 100.0).abs() < 1e-9);
        assert!((buf.norm() - 5.0).abs() < 1e-9);
    }
}
