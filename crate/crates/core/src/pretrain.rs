//! The dual-level contrastive pretraining loop.

use crate::augment::{make_views, AugmentError, AugmentationConfig, EnhancedFrame};
use crate::autodiff::Graph;
use crate::data::MotionDataset;
use crate::encoder::{rows_to_features, Encoder, EncoderArch, EncoderConfig, EncoderError, FeatureVector, MomentumState};
use crate::loss::{enqueue_step, frame_loss, sequence_loss, total_loss, LossConfig, LossError, NegativeQueue};
use crate::optim::{clip_global_norm, cosine_lr, Sgd};
use crate::tensor::Matrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("training diverged at step {step} (sequence {sequence}): l_s = {l_s}, l_f = {l_f}")]
    Divergence {
        step: usize,
        sequence: String,
        l_s: f64,
        l_f: f64,
    },
    #[error("invalid schedule: {0}")]
    Schedule(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Heavy-ball coefficient of the SGD optimiser.
    pub sgd_momentum: f64,
    /// Momentum-encoder coefficient.
    pub alpha: f64,
    pub queue_capacity: usize,
    /// Global gradient-norm cap.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 5e-4,
            sgd_momentum: 0.9,
            alpha: 0.999,
            queue_capacity: 4096,
            grad_clip: 5.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub augmentation: AugmentationConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub schedule: Schedule,
}

/// One row of the loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_s: f64,
    pub l_f: f64,
    pub total: f64,
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub arch: EncoderArch,
    pub state: MomentumState,
    pub curve: Vec<LossRecord>,
    pub queue: NegativeQueue,
    /// Drives initialisation and epoch order.
    pub rng: ChaCha8Rng,
    /// Drives view sampling and perturbation.
    pub view_rng: ChaCha8Rng,
}

impl PretrainOutput {
    /// The native encoder, which is the one used downstream.
    pub fn encoder(&self) -> Encoder {
        Encoder {
            arch: self.arch.clone(),
            params: self.state.theta_q.clone(),
        }
    }

    /// Mean total loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        epoch_means(&self.curve)
    }
}

pub fn epoch_means(curve: &[LossRecord]) -> Vec<f64> {
    let epochs = curve.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let rows: Vec<f64> = curve.iter().filter(|r| r.epoch == e).map(|r| r.total).collect();
            rows.iter().sum::<f64>() / rows.len().max(1) as f64
        })
        .collect()
}

/// Writes the curve as `step,l_s,l_f,total` CSV.
pub fn write_loss_csv<W: Write>(curve: &[LossRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "step,l_s,l_f,total")?;
    for r in curve {
        writeln!(w, "{},{},{},{}", r.step, r.l_s, r.l_f, r.total)?;
    }
    Ok(())
}

/// Result of one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLoss {
    pub l_s: f64,
    pub l_f: f64,
    pub total: f64,
    pub grads: Vec<Matrix>,
    pub f1: FeatureVector,
    pub f2: FeatureVector,
    pub negative: FeatureVector,
}

/// Losses and native-encoder gradients for one set of views.
///
/// The native encoder embeds `positive_1`; the momentum encoder embeds
/// `positive_2`, the negative view and the aligned companion view, and
/// receives no gradient.
pub fn step_loss(
    arch: &EncoderArch,
    state: &MomentumState,
    views: &crate::augment::ContrastiveViews,
    queue: &NegativeQueue,
    loss: &LossConfig,
) -> Result<StepLoss, PretrainError> {
    let mut g = Graph::new();
    let out = arch.forward(&mut g, &state.theta_q, &views.positive_1)?;
    let f1 = FeatureVector::from_unit_unchecked(g.value(out.sequence_feature).row(0).to_vec());
    let key = Encoder {
        arch: arch.clone(),
        params: state.theta_k.clone(),
    };
    let f2 = key.encode(&views.positive_2)?.sequence;
    let negative = key.encode(&views.negative)?.sequence;
    let ls = sequence_loss(&f1, &f2, queue, loss.tau);
    let mut seeds = vec![(out.sequence_feature, Matrix::from_vec(1, ls.grad_f1.len(), ls.grad_f1.clone()))];
    let mut lf_value = 0.0;
    if loss.omega != 0.0 {
        let frames_1 = rows_to_features(g.value(out.frame_features));
        let frames_2 = key.encode(&views.aligned_2)?.frames;
        let lf = frame_loss(&frames_1, &frames_2, loss)?;
        lf_value = lf.value;
        let d = arch.config.feature_dim;
        let mut m = Matrix::zeros(frames_1.len(), d);
        for (r, row) in lf.grad_f1.iter().enumerate() {
            for (o, v) in m.row_mut(r).iter_mut().zip(row) {
                *o = loss.omega * v;
            }
        }
        seeds.push((out.frame_features, m));
    }
    let grads = g.backward(&seeds).param_grads(&g, &state.theta_q);
    Ok(StepLoss {
        l_s: ls.value,
        l_f: lf_value,
        total: total_loss(ls.value, lf_value, loss.omega),
        grads,
        f1,
        f2,
        negative,
    })
}

impl PretrainConfig {
    /// Checks that do not depend on the dataset.
    pub fn validate(&self) -> Result<(), PretrainError> {
        let sched = &self.schedule;
        if !(sched.learning_rate >= 0.0) || !(sched.grad_clip > 0.0) {
            return Err(PretrainError::Schedule("learning_rate must be >= 0 and grad_clip > 0".into()));
        }
        if !(sched.alpha >= 0.0 && sched.alpha <= 1.0) {
            return Err(PretrainError::Schedule("alpha must lie in [0, 1]".into()));
        }
        if !(self.loss.tau > 0.0) || self.loss.t_nb == 0 {
            return Err(PretrainError::Schedule("tau must be positive and t_nb at least 1".into()));
        }
        self.encoder.validate()?;
        Ok(())
    }
}

/// Enhances every sequence once up front.
pub fn enhance_dataset(ds: &MotionDataset, aug: &AugmentationConfig) -> Result<Vec<Vec<EnhancedFrame>>, AugmentError> {
    ds.sequences.iter().map(|s| aug.enhance(s)).collect()
}

/// Runs contrastive pretraining.
///
/// Each epoch visits the sequences in a seeded random order. Per sequence:
/// build views, compute the total loss, take a clipped SGD step on the native
/// encoder, move the momentum encoder, then enqueue the negative and both
/// positive sequence features.
pub fn pretrain(ds: &MotionDataset, cfg: &PretrainConfig) -> Result<PretrainOutput, PretrainError> {
    pretrain_with(ds, cfg, |_| {})
}

/// [`pretrain`] with a callback invoked after every step.
pub fn pretrain_with<F: FnMut(&LossRecord)>(
    ds: &MotionDataset,
    cfg: &PretrainConfig,
    mut on_step: F,
) -> Result<PretrainOutput, PretrainError> {
    if ds.is_empty() {
        return Err(PretrainError::EmptyDataset);
    }
    cfg.validate()?;
    let sched = &cfg.schedule;
    cfg.augmentation.validate(ds.fps)?;
    let steps = cfg.augmentation.steps(ds.fps)?;
    let mut enc_cfg = cfg.encoder.clone();
    enc_cfg.max_frames = enc_cfg.max_frames.max(cfg.augmentation.n_ds);
    let arch = EncoderArch::new(enc_cfg, ds.num_joints(), steps)?;
    let enhanced = enhance_dataset(ds, &cfg.augmentation)?;

    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut view_rng = ChaCha8Rng::seed_from_u64(cfg.augmentation.seed);
    let init = arch.init_params(&mut rng);
    let mut state = MomentumState::new(init, sched.alpha)?;
    let mut opt = Sgd::new(&state.theta_q, sched.sgd_momentum);
    let mut queue = NegativeQueue::new(sched.queue_capacity);
    let total_steps = sched.epochs * ds.len();
    let mut curve = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut step = 0;
    for epoch in 0..sched.epochs {
        order.shuffle(&mut rng);
        for &idx in &order {
            let views = make_views(&enhanced[idx], &cfg.augmentation, &mut view_rng);
            let mut s = step_loss(&arch, &state, &views, &queue, &cfg.loss)?;
            if !s.total.is_finite() {
                return Err(PretrainError::Divergence {
                    step,
                    sequence: ds.sequences[idx].id.clone(),
                    l_s: s.l_s,
                    l_f: s.l_f,
                });
            }
            clip_global_norm(&mut s.grads, sched.grad_clip);
            let lr = cosine_lr(sched.learning_rate, step, total_steps);
            opt.step(&mut state.theta_q, &s.grads, lr);
            state.update()?;
            queue = enqueue_step(queue, s.negative, s.f1, s.f2);
            let rec = LossRecord {
                step,
                epoch,
                l_s: s.l_s,
                l_f: s.l_f,
                total: s.total,
            };
            on_step(&rec);
            curve.push(rec);
            step += 1;
        }
    }
    Ok(PretrainOutput {
        arch,
        state,
        curve,
        queue,
        rng,
        view_rng,
    })
}
