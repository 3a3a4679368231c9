//! Per-frame multi-label annotator over frozen frame features, and the
//! F1 evaluation of its predictions.

use crate::data::LabelMatrix;
use crate::encoder::FeatureVector;
use crate::mlp::Mlp;
use crate::optim::Adam;
use crate::tensor::Matrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnnotateError {
    #[error("no labelled sequences to train on")]
    NoLabels,
    #[error("no features for sequence {0}")]
    MissingFeatures(String),
    #[error("sequence {id}: {labels} label rows but {features} feature frames")]
    LengthMismatch { id: String, labels: usize, features: usize },
    #[error("sequence {id}: {found} classes, expected {expected}")]
    ClassMismatch { id: String, expected: usize, found: usize },
    #[error("feature dimension {found}, annotator expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("prediction and truth cover different sequences: {0}")]
    Coverage(String),
    #[error("invalid annotator config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotatorConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Decision threshold on each class probability.
    pub threshold: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            epochs: 50,
            learning_rate: 1e-3,
            threshold: 0.5,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl AnnotatorConfig {
    pub fn validate(&self) -> Result<(), AnnotateError> {
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(AnnotateError::Config("hidden and batch_size must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(AnnotateError::Config(format!("threshold {} not in (0, 1)", self.threshold)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(AnnotateError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnnotateWarning {
    /// The class has no positive frame in the training labels and is never
    /// predicted.
    NoPositives { class: usize },
}

#[derive(Clone, Debug)]
pub struct Annotator {
    mlp: Mlp,
    active: Vec<bool>,
    pub warnings: Vec<AnnotateWarning>,
    pub train_seconds: f64,
    pub train_frames: usize,
}

/// Trains the annotator on every labelled sequence.
///
/// `features` must hold frame features for each id in `labels`; extra
/// entries are ignored.
pub fn train_annotator(
    features: &BTreeMap<String, Vec<FeatureVector>>,
    labels: &BTreeMap<String, LabelMatrix>,
    cfg: &AnnotatorConfig,
) -> Result<Annotator, AnnotateError> {
    cfg.validate()?;
    let started = Instant::now();
    let first = labels.values().next().ok_or(AnnotateError::NoLabels)?;
    let classes = first.num_classes();
    let mut dim = None;
    let mut rows = 0;
    for (id, lab) in labels {
        let f = features.get(id).ok_or_else(|| AnnotateError::MissingFeatures(id.clone()))?;
        if f.len() != lab.num_frames() {
            return Err(AnnotateError::LengthMismatch {
                id: id.clone(),
                labels: lab.num_frames(),
                features: f.len(),
            });
        }
        if let Some(bad) = lab.labels.iter().find(|r| r.len() != classes) {
            return Err(AnnotateError::ClassMismatch {
                id: id.clone(),
                expected: classes,
                found: bad.len(),
            });
        }
        for v in f {
            let d = *dim.get_or_insert(v.dim());
            if v.dim() != d {
                return Err(AnnotateError::Dimension { expected: d, found: v.dim() });
            }
        }
        rows += f.len();
    }
    let dim = dim.ok_or(AnnotateError::NoLabels)?;
    if classes == 0 {
        return Err(AnnotateError::Config("labels have no classes".into()));
    }
    let mut x = Vec::with_capacity(rows * dim);
    let mut y = Vec::with_capacity(rows * classes);
    for (id, lab) in labels {
        for (f, r) in features[id].iter().zip(&lab.labels) {
            x.extend_from_slice(f.as_slice());
            y.extend(r.iter().map(|&v| v as f64));
        }
    }
    let x = Matrix::from_vec(rows, dim, x);
    let y = Matrix::from_vec(rows, classes, y);
    let mut active = vec![false; classes];
    for r in 0..rows {
        for (a, &v) in active.iter_mut().zip(y.row(r)) {
            *a |= v > 0.5;
        }
    }
    let warnings = active
        .iter()
        .enumerate()
        .filter(|(_, &a)| !a)
        .map(|(class, _)| AnnotateWarning::NoPositives { class })
        .collect::<Vec<_>>();
    for w in &warnings {
        log::warn!("annotator: {w:?}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mlp = Mlp::new(&[dim, cfg.hidden, classes], &mut rng);
    let mut opt = Adam::new(&mlp.params);
    let mut order: Vec<usize> = (0..rows).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            mlp.train_step(&mut opt, cfg.learning_rate, &x.select_rows(chunk), &y.select_rows(chunk), None);
        }
    }
    Ok(Annotator {
        mlp,
        active,
        warnings,
        train_seconds: started.elapsed().as_secs_f64(),
        train_frames: rows,
    })
}

impl Annotator {
    pub fn num_classes(&self) -> usize {
        self.active.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    /// Class probabilities per frame; classes without training positives
    /// score 0.
    pub fn scores(&self, frames: &[FeatureVector]) -> Result<Matrix, AnnotateError> {
        let d = self.feature_dim();
        let mut x = Vec::with_capacity(frames.len() * d);
        for f in frames {
            if f.dim() != d {
                return Err(AnnotateError::Dimension { expected: d, found: f.dim() });
            }
            x.extend_from_slice(f.as_slice());
        }
        let mut p = self.mlp.probabilities(&Matrix::from_vec(frames.len(), d, x));
        for r in 0..p.rows() {
            for (v, &a) in p.row_mut(r).iter_mut().zip(&self.active) {
                if !a {
                    *v = 0.0;
                }
            }
        }
        Ok(p)
    }

    pub fn predict(&self, id: &str, frames: &[FeatureVector], threshold: f64) -> Result<LabelMatrix, AnnotateError> {
        Ok(threshold_scores(id, &self.scores(frames)?, threshold, &self.active))
    }
}

/// Label 1 wherever a score reaches `threshold`, except for inactive
/// classes, which stay 0.
pub fn threshold_scores(id: &str, scores: &Matrix, threshold: f64, active: &[bool]) -> LabelMatrix {
    LabelMatrix {
        sequence_id: id.to_owned(),
        labels: (0..scores.rows())
            .map(|r| {
                scores
                    .row(r)
                    .iter()
                    .zip(active)
                    .map(|(&s, &a)| (a && s >= threshold) as u8)
                    .collect()
            })
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    /// `2·TP / (2·TP + FP + FN)`, and 0 when all three are 0.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub per_class: Vec<Counts>,
    pub total: Counts,
    pub frames: u64,
}

/// Micro-F1 pools counts over all frames and classes; macro-F1 averages the
/// per-class F1 scores.
pub fn evaluate(pred: &BTreeMap<String, LabelMatrix>, truth: &BTreeMap<String, LabelMatrix>) -> Result<EvalReport, AnnotateError> {
    if let Some(id) = pred.keys().find(|k| !truth.contains_key(*k)) {
        return Err(AnnotateError::Coverage(format!("{id} has a prediction but no truth")));
    }
    let classes = truth.values().next().map_or(0, LabelMatrix::num_classes);
    let mut per_class = vec![Counts::default(); classes];
    let mut frames = 0u64;
    for (id, t) in truth {
        let p = pred
            .get(id)
            .ok_or_else(|| AnnotateError::Coverage(format!("{id} has truth but no prediction")))?;
        if p.num_frames() != t.num_frames() {
            return Err(AnnotateError::LengthMismatch {
                id: id.clone(),
                labels: t.num_frames(),
                features: p.num_frames(),
            });
        }
        for (pr, tr) in p.labels.iter().zip(&t.labels) {
            if pr.len() != classes || tr.len() != classes {
                return Err(AnnotateError::ClassMismatch {
                    id: id.clone(),
                    expected: classes,
                    found: if tr.len() != classes { tr.len() } else { pr.len() },
                });
            }
            for ((c, &a), &b) in per_class.iter_mut().zip(pr).zip(tr) {
                match (a > 0, b > 0) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => {}
                }
            }
            frames += 1;
        }
    }
    let total = per_class.iter().fold(Counts::default(), |acc, c| Counts {
        tp: acc.tp + c.tp,
        fp: acc.fp + c.fp,
        fn_: acc.fn_ + c.fn_,
    });
    let per_class_f1: Vec<f64> = per_class.iter().map(Counts::f1).collect();
    let macro_f1 = if classes == 0 {
        0.0
    } else {
        per_class_f1.iter().sum::<f64>() / classes as f64
    };
    Ok(EvalReport {
        micro_f1: total.f1(),
        macro_f1,
        per_class_f1,
        per_class,
        total,
        frames,
    })
}
