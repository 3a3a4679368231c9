//! Sequence- and frame-level contrastive losses with analytic gradients, and
//! the FIFO negatives queue.

use crate::encoder::FeatureVector;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("frame loss needs at least one frame in each view")]
    EmptyFrames,
    #[error("no frame pair lies within the neighbourhood")]
    EmptyNeighbourhood,
    #[error("feature dimensions differ ({0} vs {1})")]
    Dimension(usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// Weight of the frame-level term.
    pub omega: f64,
    /// Frames `i`, `j` are neighbours when `|i - j| < t_nb`.
    pub t_nb: usize,
    /// Use the normalised (InfoNCE-ratio) frame loss instead of the literal
    /// negative log-sum-exp.
    pub normalized_frame_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            omega: 1.0,
            t_nb: 12,
            normalized_frame_loss: false,
        }
    }
}

/// Fixed-capacity FIFO of negative features.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    entries: VecDeque<FeatureVector>,
}

impl NegativeQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FeatureVector> {
        self.entries.iter()
    }

    /// Appends one feature, evicting the oldest beyond capacity.
    pub fn push(&mut self, f: FeatureVector) {
        if self.capacity == 0 {
            return;
        }
        self.entries.push_back(f);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }
}

/// Enqueues the negative view's feature, then both positives.
pub fn enqueue_step(mut queue: NegativeQueue, negative: FeatureVector, f1: FeatureVector, f2: FeatureVector) -> NegativeQueue {
    queue.push(negative);
    queue.push(f1);
    queue.push(f2);
    queue
}

/// A scalar loss with its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLoss {
    pub value: f64,
    pub grad_f1: Vec<f64>,
    pub grad_f2: Vec<f64>,
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `-log( e^{f1·f2/τ} / (e^{f1·f2/τ} + Σ_i e^{f1·q_i/τ}) )`
pub fn sequence_loss(f1: &FeatureVector, f2: &FeatureVector, queue: &NegativeQueue, tau: f64) -> SequenceLoss {
    let mut logits = Vec::with_capacity(queue.len() + 1);
    logits.push(f1.dot(f2) / tau);
    logits.extend(queue.iter().map(|q| f1.dot(q) / tau));
    let lse = log_sum_exp(&logits);
    let value = (lse - logits[0]).max(0.0);
    let probs: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    let d = f1.dim();
    let mut grad_f1 = vec![0.0; d];
    let c0 = (probs[0] - 1.0) / tau;
    for (g, v) in grad_f1.iter_mut().zip(f2.as_slice()) {
        *g += c0 * v;
    }
    for (p, q) in probs[1..].iter().zip(queue.iter()) {
        let c = p / tau;
        for (g, v) in grad_f1.iter_mut().zip(q.as_slice()) {
            *g += c * v;
        }
    }
    let grad_f2 = f1.as_slice().iter().map(|v| c0 * v).collect();
    SequenceLoss { value, grad_f1, grad_f2 }
}

/// Frame-level loss value with the gradient for every frame of the first view.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLoss {
    pub value: f64,
    /// One gradient row per frame of the first view.
    pub grad_f1: Vec<Vec<f64>>,
}

fn similarity(f1: &[FeatureVector], f2: &[FeatureVector], tau: f64) -> Result<Vec<Vec<f64>>, LossError> {
    if f1.is_empty() || f2.is_empty() {
        return Err(LossError::EmptyFrames);
    }
    let d = f1[0].dim();
    if let Some(bad) = f1.iter().chain(f2).find(|f| f.dim() != d) {
        return Err(LossError::Dimension(d, bad.dim()));
    }
    Ok(f1.iter().map(|a| f2.iter().map(|b| a.dot(b) / tau).collect()).collect())
}

/// `-log Σ_i Σ_{|i-j| < t_nb} exp(f1_i · f2_j / τ)`, exactly as written:
/// there is no normaliser, so the value is negative and bounded below only
/// through the unit norm of the features.
pub fn frame_loss(f1: &[FeatureVector], f2: &[FeatureVector], cfg: &LossConfig) -> Result<FrameLoss, LossError> {
    if cfg.normalized_frame_loss {
        return frame_loss_normalized(f1, f2, cfg);
    }
    let s = similarity(f1, f2, cfg.tau)?;
    let near = |i: usize, j: usize| i.abs_diff(j) < cfg.t_nb;
    let pos: Vec<f64> = s
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().filter(move |(j, _)| near(i, *j)).map(|(_, v)| *v))
        .collect();
    if pos.is_empty() {
        return Err(LossError::EmptyNeighbourhood);
    }
    let lse = log_sum_exp(&pos);
    let d = f1[0].dim();
    let mut grad_f1 = vec![vec![0.0; d]; f1.len()];
    for (i, g) in grad_f1.iter_mut().enumerate() {
        for (j, b) in f2.iter().enumerate() {
            if !near(i, j) {
                continue;
            }
            let w = (s[i][j] - lse).exp() / cfg.tau;
            for (gv, bv) in g.iter_mut().zip(b.as_slice()) {
                *gv -= w * bv;
            }
        }
    }
    Ok(FrameLoss { value: -lse, grad_f1 })
}

/// Per anchor frame, the negative log share of neighbour similarity mass in
/// the full row, averaged over anchors.
pub fn frame_loss_normalized(f1: &[FeatureVector], f2: &[FeatureVector], cfg: &LossConfig) -> Result<FrameLoss, LossError> {
    let s = similarity(f1, f2, cfg.tau)?;
    let n = f1.len() as f64;
    let d = f1[0].dim();
    let mut value = 0.0;
    let mut grad_f1 = vec![vec![0.0; d]; f1.len()];
    let mut any = false;
    for (i, row) in s.iter().enumerate() {
        let pos: Vec<f64> = row
            .iter()
            .enumerate()
            .filter(|(j, _)| i.abs_diff(*j) < cfg.t_nb)
            .map(|(_, v)| *v)
            .collect();
        if pos.is_empty() {
            continue;
        }
        any = true;
        let lse_pos = log_sum_exp(&pos);
        let lse_all = log_sum_exp(row);
        value += (lse_all - lse_pos) / n;
        for (j, b) in f2.iter().enumerate() {
            let w_all = (row[j] - lse_all).exp();
            let w_pos = if i.abs_diff(j) < cfg.t_nb {
                (row[j] - lse_pos).exp()
            } else {
                0.0
            };
            let c = (w_all - w_pos) / (cfg.tau * n);
            for (gv, bv) in grad_f1[i].iter_mut().zip(b.as_slice()) {
                *gv += c * bv;
            }
        }
    }
    if !any {
        return Err(LossError::EmptyNeighbourhood);
    }
    Ok(FrameLoss { value, grad_f1 })
}

/// `l_s + ω · l_f`
pub fn total_loss(ls: f64, lf: f64, omega: f64) -> f64 {
    ls + omega * lf
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::normalized(v.to_vec())
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> FeatureVector {
        FeatureVector::normalized((0..d).map(|_| rng.random::<f64>() - 0.5).collect())
    }

    #[test]
    fn sequence_loss_examples() {
        let f1 = fv(&[1.0, 0.0]);
        let empty = NegativeQueue::new(8);
        let any = fv(&[0.3, 0.7]);
        assert_eq!(sequence_loss(&f1, &any, &empty, 0.07).value, 0.0);

        let mut q = NegativeQueue::new(8);
        q.push(fv(&[0.0, 1.0]));
        let l = sequence_loss(&f1, &f1, &q, 1.0).value;
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);

        let mut q = NegativeQueue::new(8);
        q.push(fv(&[0.6, 0.8]));
        let l = sequence_loss(&f1, &fv(&[0.6, -0.8]), &q, 0.5).value;
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    /// Independent route: softmax cross-entropy of the similarity logits
    /// against class 0, computed without log-sum-exp shifting.
    fn cross_entropy(f1: &FeatureVector, f2: &FeatureVector, negs: &[FeatureVector], tau: f64) -> f64 {
        let pos = (f1.dot(f2) / tau).exp();
        let denom: f64 = pos + negs.iter().map(|n| (f1.dot(n) / tau).exp()).sum::<f64>();
        -(pos / denom).ln()
    }

    #[test]
    fn sequence_loss_is_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in [0, 1, 5, 40] {
            let f1 = random_unit(&mut rng, 16);
            let f2 = random_unit(&mut rng, 16);
            let negs: Vec<_> = (0..k).map(|_| random_unit(&mut rng, 16)).collect();
            let mut q = NegativeQueue::new(64);
            negs.iter().cloned().for_each(|n| q.push(n));
            let a = sequence_loss(&f1, &f2, &q, 0.2).value;
            let b = cross_entropy(&f1, &f2, &negs, 0.2);
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    fn perturbed(f: &FeatureVector, i: usize, h: f64) -> FeatureVector {
        let mut v = f.as_slice().to_vec();
        v[i] += h;
        // deliberately not re-normalised: the gradient is w.r.t. the raw vector
        FeatureVector::from_unit_unchecked(v)
    }

    #[test]
    fn sequence_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f1 = random_unit(&mut rng, 6);
        let f2 = random_unit(&mut rng, 6);
        let mut q = NegativeQueue::new(10);
        for _ in 0..7 {
            q.push(random_unit(&mut rng, 6));
        }
        let l = sequence_loss(&f1, &f2, &q, 0.3);
        let h = 1e-6;
        for i in 0..6 {
            let n1 = (sequence_loss(&perturbed(&f1, i, h), &f2, &q, 0.3).value
                - sequence_loss(&perturbed(&f1, i, -h), &f2, &q, 0.3).value)
                / (2.0 * h);
            assert!((n1 - l.grad_f1[i]).abs() < 1e-6 * (1.0 + n1.abs()));
            let n2 = (sequence_loss(&f1, &perturbed(&f2, i, h), &q, 0.3).value
                - sequence_loss(&f1, &perturbed(&f2, i, -h), &q, 0.3).value)
                / (2.0 * h);
            assert!((n2 - l.grad_f2[i]).abs() < 1e-6 * (1.0 + n2.abs()));
        }
    }

    #[test]
    fn frame_loss_examples() {
        let cfg = LossConfig {
            tau: 1.0,
            ..Default::default()
        };
        let a = fv(&[1.0, 0.0]);
        let l = frame_loss(&[a.clone()], &[a.clone()], &cfg).unwrap();
        assert!((l.value + 1.0).abs() < 1e-12);

        let b = fv(&[0.0, 1.0]);
        let l = frame_loss(&[a.clone(), a.clone()], &[b.clone(), b.clone()], &cfg).unwrap();
        assert!((l.value + 4f64.ln()).abs() < 1e-12);
        assert!((l.value + 1.386).abs() < 1e-3);

        let pos = fv(&[0.8, 0.6]);
        let mut prev = f64::INFINITY;
        for tau in [1.0, 0.5, 0.2, 0.07] {
            let c = LossConfig { tau, ..cfg.clone() };
            let v = frame_loss(&[a.clone(), a.clone()], &[pos.clone(), pos.clone()], &c).unwrap().value;
            assert!(v < prev);
            prev = v;
        }
        assert_eq!(frame_loss(&[], &[a], &cfg), Err(LossError::EmptyFrames));
    }

    #[test]
    fn frame_loss_respects_neighbourhood() {
        let cfg = LossConfig {
            tau: 1.0,
            t_nb: 1,
            ..Default::default()
        };
        // only the diagonal counts with t_nb = 1
        let a = fv(&[1.0, 0.0]);
        let b = fv(&[0.0, 1.0]);
        let l = frame_loss(&[a.clone(), b.clone()], &[a.clone(), b.clone()], &cfg).unwrap();
        assert!((l.value + (2.0 * 1f64.exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn frame_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f1: Vec<_> = (0..5).map(|_| random_unit(&mut rng, 4)).collect();
        let f2: Vec<_> = (0..5).map(|_| random_unit(&mut rng, 4)).collect();
        for normalized in [false, true] {
            let cfg = LossConfig {
                tau: 0.5,
                t_nb: 2,
                normalized_frame_loss: normalized,
                ..Default::default()
            };
            let l = frame_loss(&f1, &f2, &cfg).unwrap();
            let h = 1e-6;
            for i in 0..5 {
                for c in 0..4 {
                    let mut p = f1.clone();
                    p[i] = perturbed(&f1[i], c, h);
                    let mut m = f1.clone();
                    m[i] = perturbed(&f1[i], c, -h);
                    let n = (frame_loss(&p, &f2, &cfg).unwrap().value - frame_loss(&m, &f2, &cfg).unwrap().value)
                        / (2.0 * h);
                    assert!((n - l.grad_f1[i][c]).abs() < 1e-6 * (1.0 + n.abs()), "{normalized}");
                }
            }
        }
    }

    #[test]
    fn normalized_frame_loss_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f1: Vec<_> = (0..20).map(|_| random_unit(&mut rng, 4)).collect();
        let cfg = LossConfig {
            normalized_frame_loss: true,
            ..Default::default()
        };
        assert!(frame_loss(&f1, &f1, &cfg).unwrap().value >= 0.0);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.5, -1.0, 1.0), -0.5);
        assert_eq!(total_loss(0.7, 3.0, 0.0), 0.7);
        assert_eq!(total_loss(0.0, 0.0, 1.0), 0.0);
    }

    #[test]
    fn enqueue_examples() {
        let f = |x: f64| fv(&[x, 1.0]);
        let mut q = NegativeQueue::new(2);
        q.push(f(1.0));
        q.push(f(2.0));
        let q = enqueue_step(q, f(3.0), f(4.0), f(5.0));
        assert_eq!(q.iter().cloned().collect::<Vec<_>>(), vec![f(4.0), f(5.0)]);
        let q = enqueue_step(NegativeQueue::new(10), f(1.0), f(2.0), f(3.0));
        assert_eq!(q.len(), 3);
        let q = enqueue_step(NegativeQueue::new(0), f(1.0), f(2.0), f(3.0));
        assert!(q.is_empty());
    }

    proptest! {
        #[test]
        fn queue_keeps_the_most_recent_in_order(cap in 0usize..20, steps in 0usize..30) {
            let mut q = NegativeQueue::new(cap);
            let mut all = Vec::new();
            for s in 0..steps {
                let feats: Vec<_> = (0..3).map(|k| fv(&[(3 * s + k) as f64, 1.0])).collect();
                all.extend(feats.iter().cloned());
                q = enqueue_step(q, feats[0].clone(), feats[1].clone(), feats[2].clone());
                prop_assert!(q.len() <= cap);
            }
            let expect = &all[all.len().saturating_sub(cap)..];
            prop_assert_eq!(q.iter().cloned().collect::<Vec<_>>(), expect.to_vec());
        }
    }
}
