//! Central finite-difference checks for tape gradients.

use crate::autodiff::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Below this magnitude errors are measured absolutely rather than relatively.
pub const GRADIENT_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// Compares the tape gradient of the scalar built by `build` against central
/// differences with step `h`, over `ids` (every parameter when `None`).
pub fn check_gradients(
    store: &mut ParamStore,
    ids: Option<&[ParamId]>,
    h: f64,
    build: impl Fn(&mut Graph, &ParamStore) -> Var,
) -> GradCheck {
    let mut g = Graph::new();
    let out = build(&mut g, store);
    let grads = g.backward(out);
    let all: Vec<ParamId> = match ids {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut report = GradCheck {
        max_error: 0.0,
        worst: None,
        checked: 0,
    };
    for id in all {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| {
            let (r, c) = store.get(id).shape();
            Matrix::zeros(r, c)
        });
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let fp = eval(store, &build);
            store.get_mut(id).data_mut()[k] = orig - h;
            let fm = eval(store, &build);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADIENT_FLOOR);
            report.checked += 1;
            if err > report.max_error || report.worst.is_none() {
                report.max_error = report.max_error.max(err);
                if err >= report.max_error {
                    report.worst = Some((store.name(id).to_owned(), k, a, numeric));
                }
            }
        }
    }
    report
}

fn eval(store: &ParamStore, build: &impl Fn(&mut Graph, &ParamStore) -> Var) -> f64 {
    let mut g = Graph::new();
    let out = build(&mut g, store);
    g.value(out).item()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_correct_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Matrix::row_vector(vec![0.3, -0.7]));
        let r = check_gradients(&mut store, None, 1e-6, |g, s| {
            let x = g.param(s, p);
            let t = g.tanh(x);
            g.sum(t)
        });
        assert_eq!(r.checked, 2);
        assert!(r.max_error < 1e-6);
    }
}
