//! Linear probe: multinomial logistic regression on frozen sequence
//! features, scored by held-out accuracy.

use crate::autodiff::ParamSet;
use crate::optim::Adam;
use crate::tensor::{gemm, Matrix};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Share of each class held out for testing when `folds < 2`.
    pub test_fraction: f64,
    /// Stratified cross-validation folds; below 2 a single split is used.
    pub folds: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// L2 penalty on the weights.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.3,
            folds: 5,
            iterations: 300,
            learning_rate: 0.05,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Mean over folds of the training-split accuracy.
    pub train_accuracy: f64,
    /// Share of held-out rows classified correctly, pooled over folds.
    pub test_accuracy: f64,
    /// Training rows of one fit (the first fold under cross-validation).
    pub train_size: usize,
    /// Held-out rows, summed over folds.
    pub test_size: usize,
}

/// Stratified split: the first `ceil(test_fraction · n_c)` of each shuffled
/// class go to the test set, keeping at least one training example when a
/// class has two or more.
pub fn stratified_split(labels: &[usize], test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let mut k = (test_fraction * idx.len() as f64).ceil() as usize;
        if idx.len() >= 2 {
            k = k.min(idx.len() - 1);
        } else {
            k = 0;
        }
        test.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Stratified fold index of every row: each shuffled class is dealt round
/// robin over the folds.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    let mut next = 0;
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            fold[i] = next % folds.max(1);
            next += 1;
        }
    }
    fold
}

fn hits(w: &Matrix, b: &Matrix, x: &Matrix, y: &[usize]) -> usize {
    if y.is_empty() {
        return 0;
    }
    let logits = affine(w, b, x);
    (0..logits.rows())
        .filter(|&r| {
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |a, c| if row[c] > row[a] { c } else { a });
            best == y[r]
        })
        .count()
}

fn accuracy(w: &Matrix, b: &Matrix, x: &Matrix, y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    hits(w, b, x, y) as f64 / y.len() as f64
}

fn affine(w: &Matrix, b: &Matrix, x: &Matrix) -> Matrix {
    let mut z = Matrix::zeros(x.rows(), w.cols());
    for r in 0..z.rows() {
        z.row_mut(r).copy_from_slice(b.as_slice());
    }
    gemm(1.0, x, false, w, false, 1.0, &mut z);
    z
}

/// Fits softmax regression by full-batch Adam on the training rows of each
/// split and reports held-out accuracy, pooled over folds.
pub fn linear_probe(features: &Matrix, labels: &[usize], cfg: &ProbeConfig) -> ProbeResult {
    assert_eq!(features.rows(), labels.len(), "one label per feature row");
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let splits: Vec<(Vec<usize>, Vec<usize>)> = if cfg.folds >= 2 {
        let fold = stratified_folds(labels, cfg.folds, cfg.seed);
        (0..cfg.folds)
            .map(|k| (0..labels.len()).partition::<Vec<usize>, _>(|&i| fold[i] != k))
            .filter(|(_, test)| !test.is_empty())
            .collect()
    } else {
        vec![stratified_split(labels, cfg.test_fraction, cfg.seed)]
    };
    let (mut correct, mut tested, mut train_acc) = (0, 0, 0.0);
    for (train, test) in &splits {
        let x = features.select_rows(train);
        let y: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let (w, b) = fit(&x, &y, classes, cfg);
        train_acc += accuracy(&w, &b, &x, &y);
        let xt = features.select_rows(test);
        let yt: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
        correct += hits(&w, &b, &xt, &yt);
        tested += yt.len();
    }
    ProbeResult {
        train_accuracy: train_acc / splits.len().max(1) as f64,
        test_accuracy: if tested == 0 { 0.0 } else { correct as f64 / tested as f64 },
        train_size: splits.first().map_or(0, |s| s.0.len()),
        test_size: tested,
    }
}

fn fit(x: &Matrix, y: &[usize], classes: usize, cfg: &ProbeConfig) -> (Matrix, Matrix) {
    let mut params = ParamSet::new();
    let wid = params.add("w", Matrix::zeros(x.cols(), classes));
    let bid = params.add("b", Matrix::zeros(1, classes));
    let mut opt = Adam::new(&params);
    let n = x.rows().max(1) as f64;
    for _ in 0..cfg.iterations {
        let mut d = affine(params.get(wid), params.get(bid), x);
        for r in 0..d.rows() {
            let row = d.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for (c, v) in row.iter_mut().enumerate() {
                *v = ((*v - m).exp() / s - (c == y[r]) as u8 as f64) / n;
            }
        }
        let mut gw = params.get(wid).clone();
        gw.scale(cfg.weight_decay);
        gemm(1.0, x, true, &d, false, 1.0, &mut gw);
        let mut gb = Matrix::zeros(1, classes);
        for r in 0..d.rows() {
            for (g, v) in gb.as_mut_slice().iter_mut().zip(d.row(r)) {
                *g += v;
            }
        }
        opt.step(&mut params, &[gw, gb], cfg.learning_rate);
    }
    (params.get(wid).clone(), params.get(bid).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn split_is_stratified_and_disjoint() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let (train, test) = stratified_split(&labels, 0.3, 1);
        assert_eq!(train.len() + test.len(), 30);
        assert_eq!(test.len(), 9);
        assert!(train.iter().all(|i| !test.contains(i)));
        for c in 0..3 {
            assert_eq!(test.iter().filter(|&&i| labels[i] == c).count(), 3);
        }
    }

    #[test]
    fn separable_classes_are_probed_accurately() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..90 {
            let c = i % 3;
            let centre = [[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]][c];
            rows.push(vec![centre[0] + 0.2 * rng.random::<f64>(), centre[1] + 0.2 * rng.random::<f64>()]);
            labels.push(c);
        }
        let single = ProbeConfig { folds: 0, ..ProbeConfig::default() };
        let r = linear_probe(&Matrix::from_rows(&rows), &labels, &single);
        assert_eq!(r.test_accuracy, 1.0);
        assert_eq!(r.test_size, 27);
        let cv = linear_probe(&Matrix::from_rows(&rows), &labels, &ProbeConfig::default());
        assert_eq!(cv.test_accuracy, 1.0);
        assert_eq!(cv.test_size, 90);
    }

    #[test]
    fn folds_are_stratified_and_balanced() {
        let labels: Vec<usize> = (0..50).map(|i| usize::from(i % 5 == 0)).collect();
        let fold = stratified_folds(&labels, 5, 3);
        for k in 0..5 {
            assert_eq!(fold.iter().filter(|&&f| f == k).count(), 10);
            assert_eq!((0..50).filter(|&i| fold[i] == k && labels[i] == 1).count(), 2);
        }
    }

    #[test]
    fn uninformative_features_give_chance_accuracy() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let x = Matrix::filled(100, 3, 1.0);
        let r = linear_probe(&x, &labels, &ProbeConfig::default());
        assert!((r.test_accuracy - 0.5).abs() < 0.11);
    }
}
