//! Action scoring, sampling and REINFORCE updates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{GradBuffer, Optimizer, ParamId, ParamStore};
use crate::tensor::{softmax, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampling {
    Sample,
    Greedy,
}

/// `w` maps the fused state row to the action-embedding width; `stop` is the
/// STOP relation's embedding.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyParams {
    pub w: ParamId,
    pub stop: ParamId,
}

impl PolicyParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, z_dim: usize, action_dim: usize, d: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (z_dim as f64).sqrt();
        Self {
            w: store.add("policy.w", Matrix::uniform(z_dim, action_dim, bound, rng)),
            stop: store.add("policy.stop", Matrix::uniform(1, d, 1.0 / (d as f64).sqrt(), rng)),
        }
    }
}

/// `softmax(A (relu(z) W)ᵀ)` for a `1×j` state row and `k×a` action matrix.
pub fn score_actions(z: &Matrix, actions: &Matrix, w: &Matrix) -> Vec<f64> {
    let query = z.map(|x| x.max(0.0)).matmul(w);
    let logits = actions.matmul(&query.transpose());
    softmax(logits.data())
}

/// Log-probabilities (`1×k`) on the tape.
pub fn score_actions_tape(g: &mut Graph, store: &ParamStore, p: &PolicyParams, z: Var, actions: Var) -> Var {
    let w = g.param(store, p.w);
    let rz = g.relu(z);
    let q = g.matmul(rz, w);
    let qt = g.transpose(q);
    let logits = g.matmul(actions, qt);
    let row = g.transpose(logits);
    g.log_softmax_rows(row)
}

/// Categorical draw, or argmax with lowest-index tie-break.
pub fn sample_action<R: Rng + ?Sized>(probs: &[f64], rng: &mut R, mode: Sampling) -> usize {
    match mode {
        Sampling::Greedy => {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            best
        }
        Sampling::Sample => {
            let total: f64 = probs.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (i, &p) in probs.iter().enumerate() {
                if u < p {
                    return i;
                }
                u -= p;
            }
            probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
        }
    }
}

/// Scalar moving-average reward baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: f64,
    pub decay: f64,
}

impl Default for Baseline {
    fn default() -> Self {
        Self { value: 0.0, decay: 0.95 }
    }
}

impl Baseline {
    pub fn update(&mut self, mean_reward: f64) {
        self.value = self.decay * self.value + (1.0 - self.decay) * mean_reward;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub mean_reward: f64,
}

/// Gradient of the REINFORCE loss over groups of trajectories.
///
/// `build(g, i)` records group `i` on a fresh tape and returns the summed
/// log-probability of each trajectory's chosen actions, aligned with
/// `rewards[i]`. The loss is `-Σ (R - b) log π` averaged over all
/// trajectories. Finiteness is left to the caller.
pub fn reinforce_gradients<F>(
    store: &ParamStore,
    baseline: &Baseline,
    rewards: &[Vec<f64>],
    mut build: F,
) -> Result<(GradBuffer, UpdateStats)>
where
    F: FnMut(&mut Graph, usize) -> Result<Vec<Var>>,
{
    let count: usize = rewards.iter().map(Vec::len).sum();
    if count == 0 {
        return Err(Error::Empty("trajectory batch"));
    }
    let mean_reward = rewards.iter().flatten().sum::<f64>() / count as f64;
    let mut buf = GradBuffer::zeros_like(store);
    let mut loss = 0.0;
    for (i, group) in rewards.iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let lps = build(&mut g, i)?;
        if lps.len() != group.len() {
            return Err(Error::Shape(format!(
                "group {i}: {} log-probs for {} rewards",
                lps.len(),
                group.len()
            )));
        }
        let weights = Matrix::row_vector(group.iter().map(|r| -(r - baseline.value) / count as f64).collect());
        let stacked = g.concat_cols(&lps);
        let w = g.constant(weights);
        let weighted = g.mul(stacked, w);
        let out = g.sum(weighted);
        loss += g.value(out).item();
        let grads = g.backward(out);
        buf.accumulate(&grads, 1.0);
    }
    let grad_norm = buf.norm();
    Ok((
        buf,
        UpdateStats {
            loss,
            grad_norm,
            mean_reward,
        },
    ))
}

/// One REINFORCE step: gradients, a clipped optimizer step, then the
/// baseline moves toward the batch mean reward.
pub fn reinforce_update<F>(
    store: &mut ParamStore,
    opt: &mut Optimizer,
    baseline: &mut Baseline,
    rewards: &[Vec<f64>],
    mut build: F,
) -> Result<UpdateStats>
where
    F: FnMut(&mut Graph, &ParamStore, usize) -> Result<Vec<Var>>,
{
    if let Some(r) = rewards.iter().flatten().find(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("reward {r}")));
    }
    let (mut buf, stats) = {
        let view: &ParamStore = store;
        reinforce_gradients(view, baseline, rewards, |g, i| build(g, view, i))?
    };
    if !stats.loss.is_finite() || !buf.is_finite() {
        return Err(Error::NonFinite(format!("policy loss {}", stats.loss)));
    }
    opt.apply(store, &mut buf);
    baseline.update(stats.mean_reward);
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::OptimizerKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_and_symmetric_actions() {
        let z = Matrix::row_vector(vec![0.3, -0.2]);
        let w = Matrix::from_vec(2, 2, vec![1.0, 0.5, -0.3, 2.0]);
        assert_eq!(score_actions(&z, &Matrix::row_vector(vec![1.0, 1.0]), &w), vec![1.0]);
        let p = score_actions(&z, &Matrix::from_vec(2, 2, vec![0.4, 0.1, 0.4, 0.1]), &w);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn scoring_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Matrix::uniform(1, 4, 1.0, &mut rng);
        let a = Matrix::uniform(5, 3, 1.0, &mut rng);
        let w = Matrix::uniform(4, 3, 1.0, &mut rng);
        let got = score_actions(&z, &a, &w);
        let mut logits = vec![0.0; 5];
        for (k, l) in logits.iter_mut().enumerate() {
            for c in 0..3 {
                let mut q = 0.0;
                for r in 0..4 {
                    q += z.get(0, r).max(0.0) * w.get(r, c);
                }
                *l += a.get(k, c) * q;
            }
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z_sum: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for (g, l) in got.iter().zip(&logits) {
            assert!((g - (l - m).exp() / z_sum).abs() < 1e-12);
        }
        let mut store = ParamStore::new();
        let p = PolicyParams {
            w: store.add("policy.w", w.clone()),
            stop: store.add("policy.stop", Matrix::zeros(1, 1)),
        };
        let mut g = Graph::new();
        let zv = g.constant(z);
        let av = g.constant(a);
        let lp = score_actions_tape(&mut g, &store, &p, zv, av);
        for (x, y) in g.value(lp).data().iter().zip(&got) {
            assert!((x.exp() - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_action(&[0.0, 0.0, 1.0], &mut rng, Sampling::Sample), 2);
        assert_eq!(sample_action(&[0.1, 0.7, 0.2], &mut rng, Sampling::Greedy), 1);
        assert_eq!(sample_action(&[0.4, 0.4, 0.2], &mut rng, Sampling::Greedy), 0);
    }

    #[test]
    fn sample_frequencies_within_three_sigma() {
        let probs = [0.1, 0.25, 0.05, 0.6];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_action(&probs, &mut rng, Sampling::Sample)] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{c} vs {p}");
        }
    }

    fn bandit(store: &mut ParamStore) -> PolicyParams {
        PolicyParams {
            w: store.add("policy.w", Matrix::from_vec(1, 2, vec![0.1, -0.2])),
            stop: store.add("policy.stop", Matrix::zeros(1, 1)),
        }
    }

    fn arm_log_prob(g: &mut Graph, store: &ParamStore, p: &PolicyParams, arm: usize) -> Var {
        let z = g.constant(Matrix::scalar(1.0));
        let a = g.constant(Matrix::identity(2));
        let lp = score_actions_tape(g, store, p, z, a);
        g.slice_cols(lp, arm, 1)
    }

    #[test]
    fn centered_advantage_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        let p = bandit(&mut store);
        let before = store.get(p.w).clone();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, 5.0);
        let mut base = Baseline { value: 0.7, decay: 0.95 };
        reinforce_update(&mut store, &mut opt, &mut base, &[vec![0.7, 0.7]], |g, s, _| {
            Ok(vec![arm_log_prob(g, s, &p, 0), arm_log_prob(g, s, &p, 1)])
        })
        .unwrap();
        assert_eq!(store.get(p.w), &before);
    }

    #[test]
    fn positive_advantage_raises_taken_log_prob() {
        let mut store = ParamStore::new();
        let p = bandit(&mut store);
        let probe = |s: &ParamStore| {
            let mut g = Graph::new();
            let v = arm_log_prob(&mut g, s, &p, 1);
            g.value(v).item()
        };
        let before = probe(&store);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.01, 5.0);
        let mut base = Baseline::default();
        reinforce_update(&mut store, &mut opt, &mut base, &[vec![1.0]], |g, s, _| {
            Ok(vec![arm_log_prob(g, s, &p, 1)])
        })
        .unwrap();
        assert!(probe(&store) > before);
        assert!((base.value - 0.05).abs() < 1e-12);
    }

    #[test]
    fn bandit_converges_to_rewarded_arm() {
        let mut store = ParamStore::new();
        let p = bandit(&mut store);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, 5.0);
        let mut base = Baseline::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let probs = score_actions(&Matrix::scalar(1.0), &Matrix::identity(2), store.get(p.w));
            let arm = sample_action(&probs, &mut rng, Sampling::Sample);
            let reward = if arm == 1 { 1.0 } else { 0.0 };
            reinforce_update(&mut store, &mut opt, &mut base, &[vec![reward]], |g, s, _| {
                Ok(vec![arm_log_prob(g, s, &p, arm)])
            })
            .unwrap();
        }
        let probs = score_actions(&Matrix::scalar(1.0), &Matrix::identity(2), store.get(p.w));
        assert!(probs[1] > 0.95, "{probs:?}");
    }
}
