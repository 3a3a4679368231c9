//! Dilated trajectory enhancement and the contrastive view augmentations.

use crate::data::{MotionSequence, Vec3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("dilation window yields n = floor({window} * {fps} / {dilation}) = 0 trajectory steps")]
    EmptyWindow { window: f64, fps: f64, dilation: usize },
    #[error("dilation factor must be at least 1")]
    ZeroDilation,
    #[error("downsample a={offset}, delta={interval}, n_ds={count} exceeds {len} frames")]
    OutOfRange {
        offset: usize,
        interval: usize,
        count: usize,
        len: usize,
    },
    #[error("invalid augmentation config: {0}")]
    Config(String),
}

/// A pose together with its dilated joint trajectories.
///
/// Storage is joint-major. For every joint, `2n + 1` blocks of three
/// coordinates follow each other: the backward differences
/// `s_j - s_{j-nl}, ..., s_j - s_{j-l}`, the position `s_j` itself, then the
/// forward differences `s_{j+l} - s_j, ..., s_{j+nl} - s_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedFrame {
    joints: usize,
    steps: usize,
    data: Vec<f64>,
}

impl EnhancedFrame {
    /// The all-zero frame used for the missing-data perturbation.
    pub fn zeros(joints: usize, steps: usize) -> Self {
        Self {
            joints,
            steps,
            data: vec![0.0; joints * (2 * steps + 1) * 3],
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joints
    }

    /// `n`, the number of trajectory steps on each side.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn num_blocks(&self) -> usize {
        2 * self.steps
    }

    /// Width of one joint's input vector, `(2n + 1) * 3`.
    pub fn joint_width(&self) -> usize {
        (2 * self.steps + 1) * 3
    }

    pub fn joint_features(&self, j: usize) -> &[f64] {
        let w = self.joint_width();
        &self.data[j * w..(j + 1) * w]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn block(&self, j: usize, b: usize) -> Vec3 {
        let o = j * self.joint_width() + b * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn center(&self) -> Vec<Vec3> {
        (0..self.joints).map(|j| self.block(j, self.steps)).collect()
    }

    /// Trajectory block `b` in `0..2n`: backward blocks first, far to near,
    /// then forward blocks near to far.
    pub fn trajectory(&self, b: usize) -> Vec<Vec3> {
        assert!(b < self.num_blocks(), "trajectory block out of range");
        let slot = if b < self.steps { b } else { b + 1 };
        (0..self.joints).map(|j| self.block(j, slot)).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Number of trajectory steps `n = floor(t * fps / l)`.
pub fn trajectory_steps(window: f64, fps: f64, dilation: usize) -> Result<usize, AugmentError> {
    if dilation == 0 {
        return Err(AugmentError::ZeroDilation);
    }
    let n = (window * fps / dilation as f64 + 1e-9).floor();
    if !(n >= 1.0) {
        return Err(AugmentError::EmptyWindow { window, fps, dilation });
    }
    Ok(n as usize)
}

/// Enhances every frame with its dilated joint trajectories. Indices falling
/// outside the sequence are clamped to the nearest frame.
pub fn enhance(seq: &MotionSequence, dilation: usize, window: f64) -> Result<Vec<EnhancedFrame>, AugmentError> {
    let n = trajectory_steps(window, seq.fps, dilation)?;
    Ok(enhance_with_steps(seq, dilation, n))
}

/// [`enhance`] with an explicit step count; `steps = 0` keeps only positions.
pub fn enhance_with_steps(seq: &MotionSequence, dilation: usize, steps: usize) -> Vec<EnhancedFrame> {
    let t_len = seq.frames.len() as isize;
    let joints = seq.num_joints();
    let clamp = |i: isize| i.clamp(0, t_len - 1) as usize;
    (0..t_len)
        .map(|t| {
            let cur = &seq.frames[t as usize].joints;
            let mut data = Vec::with_capacity(joints * (2 * steps + 1) * 3);
            for j in 0..joints {
                let s = cur[j];
                for k in (1..=steps).rev() {
                    let p = seq.frames[clamp(t - (k * dilation) as isize)].joints[j];
                    data.extend_from_slice(&[s[0] - p[0], s[1] - p[1], s[2] - p[2]]);
                }
                data.extend_from_slice(&s);
                for k in 1..=steps {
                    let p = seq.frames[clamp(t + (k * dilation) as isize)].joints[j];
                    data.extend_from_slice(&[p[0] - s[0], p[1] - s[1], p[2] - s[2]]);
                }
            }
            EnhancedFrame { joints, steps, data }
        })
        .collect()
}

/// An augmented, ordered list of enhanced frames.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub frames: Vec<EnhancedFrame>,
}

impl View {
    pub fn new(frames: Vec<EnhancedFrame>) -> Self {
        Self { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Which augmentations are active. All on is the full method; the ablation
/// harness switches them off one by one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentToggles {
    pub perturbation: bool,
    pub dilation: bool,
    pub downsampling: bool,
    pub reverse: bool,
}

impl Default for AugmentToggles {
    fn default() -> Self {
        Self {
            perturbation: true,
            dilation: true,
            downsampling: true,
            reverse: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Probability that a frame is perturbed at all.
    pub t_pb: f64,
    /// Share of perturbations that are missing-data (zeroing) rather than disorder.
    pub t_md: f64,
    /// Target view length.
    pub n_ds: usize,
    /// Trajectory window `t`, in seconds.
    pub window: f64,
    /// Dilation factor `l`, in frames.
    pub dilation: usize,
    pub seed: u64,
    pub toggles: AugmentToggles,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            t_pb: 0.15,
            t_md: 0.9,
            n_ds: 512,
            window: 0.25,
            dilation: 10,
            seed: 0,
            toggles: AugmentToggles::default(),
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self, fps: f64) -> Result<(), AugmentError> {
        if !(0.0..=1.0).contains(&self.t_pb) || !(0.0..=1.0).contains(&self.t_md) {
            return Err(AugmentError::Config("t_pb and t_md must lie in [0, 1]".into()));
        }
        if self.n_ds == 0 {
            return Err(AugmentError::Config("n_ds must be positive".into()));
        }
        if self.toggles.dilation {
            trajectory_steps(self.window, fps, self.dilation)?;
        }
        Ok(())
    }

    /// Trajectory steps the encoder input will carry at this frame rate.
    pub fn steps(&self, fps: f64) -> Result<usize, AugmentError> {
        if self.toggles.dilation {
            trajectory_steps(self.window, fps, self.dilation)
        } else {
            Ok(0)
        }
    }

    /// Enhances a sequence according to the toggles.
    pub fn enhance(&self, seq: &MotionSequence) -> Result<Vec<EnhancedFrame>, AugmentError> {
        let steps = self.steps(seq.fps)?;
        Ok(enhance_with_steps(seq, self.dilation.max(1), steps))
    }
}

/// Applies one perturbation draw `p` to a frame index. Returns the action.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perturbation {
    Keep,
    Missing,
    Disorder,
}

pub fn perturbation_for(p: f64, t_pb: f64, t_md: f64) -> Perturbation {
    if p < t_pb * t_md {
        Perturbation::Missing
    } else if p < t_pb {
        Perturbation::Disorder
    } else {
        Perturbation::Keep
    }
}

/// Perturbs with explicit per-frame draws; disorder picks a replacement with
/// `pick` from the unperturbed source.
pub fn perturb_with<F: FnMut() -> usize>(v: &View, draws: &[f64], t_pb: f64, t_md: f64, mut pick: F) -> View {
    assert_eq!(draws.len(), v.len(), "one draw per frame");
    let frames = v
        .frames
        .iter()
        .zip(draws)
        .map(|(f, &p)| match perturbation_for(p, t_pb, t_md) {
            Perturbation::Keep => f.clone(),
            Perturbation::Missing => EnhancedFrame::zeros(f.joints, f.steps),
            Perturbation::Disorder => v.frames[pick()].clone(),
        })
        .collect();
    View { frames }
}

/// Missing-data and disorder perturbation with `p_i ~ U[0, 1]`.
pub fn perturb<R: Rng + ?Sized>(v: &View, cfg: &AugmentationConfig, rng: &mut R) -> View {
    let draws: Vec<f64> = (0..v.len()).map(|_| rng.random::<f64>()).collect();
    let n = v.len();
    perturb_with(v, &draws, cfg.t_pb, cfg.t_md, || rng.random_range(0..n))
}

/// Frames `a, a + delta, ..., a + (n_ds - 1) delta`, with 1-based `a`.
pub fn downsample(v: &View, a: usize, delta: usize, n_ds: usize) -> Result<View, AugmentError> {
    let err = AugmentError::OutOfRange {
        offset: a,
        interval: delta,
        count: n_ds,
        len: v.len(),
    };
    if a == 0 || delta == 0 || n_ds == 0 {
        return Err(err);
    }
    let last = a + (n_ds - 1) * delta;
    if last > v.len() {
        return Err(err);
    }
    Ok(View {
        frames: (0..n_ds).map(|k| v.frames[a - 1 + k * delta].clone()).collect(),
    })
}

pub fn reverse(v: &View) -> View {
    View {
        frames: v.frames.iter().rev().cloned().collect(),
    }
}

/// Offset and interval of one downsampling draw (1-based offset).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sampling {
    pub offset: usize,
    pub interval: usize,
    pub count: usize,
}

/// Effective view length `min(n_ds, T)`.
pub fn view_length(n_ds: usize, len: usize) -> usize {
    n_ds.min(len)
}

/// The deterministic sampling that spreads `min(n_ds, T)` frames evenly
/// over the whole sequence.
pub fn spanning_sampling(len: usize, n_ds: usize) -> Sampling {
    let count = view_length(n_ds, len).max(1);
    let interval = if count > 1 { ((len - 1) / (count - 1)).max(1) } else { 1 };
    Sampling {
        offset: 1,
        interval,
        count,
    }
}

/// Draws `delta` uniformly from the admissible intervals, then `a` uniformly
/// among the offsets that keep the view inside the sequence.
pub fn draw_sampling<R: Rng + ?Sized>(len: usize, n_ds: usize, rng: &mut R) -> Sampling {
    let count = view_length(n_ds, len).max(1);
    let max_interval = if count > 1 { (len - 1) / (count - 1) } else { len.max(1) };
    let interval = rng.random_range(1..=max_interval.max(1));
    let max_offset = len - (count - 1) * interval;
    let offset = rng.random_range(1..=max_offset);
    Sampling {
        offset,
        interval,
        count,
    }
}

/// The views of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveViews {
    pub positive_1: View,
    pub positive_2: View,
    pub negative: View,
    /// Shares `positive_1`'s sampling with an independent perturbation, so
    /// frame indices of the two line up for the frame-level loss.
    pub aligned_2: View,
    pub samplings: [Sampling; 3],
}

fn positive<R: Rng + ?Sized>(src: &View, s: Sampling, cfg: &AugmentationConfig, rng: &mut R) -> View {
    let base = downsample(src, s.offset, s.interval, s.count).expect("sampling drawn within bounds");
    if cfg.toggles.perturbation {
        perturb(&base, cfg, rng)
    } else {
        base
    }
}

/// Builds the two positive views and the negative view of a sequence.
///
/// With downsampling disabled every view uses [`spanning_sampling`]; with
/// reverse disabled the negative view keeps its frame order.
pub fn make_views<R: Rng + ?Sized>(x: &[EnhancedFrame], cfg: &AugmentationConfig, rng: &mut R) -> ContrastiveViews {
    assert!(!x.is_empty(), "cannot build views of an empty sequence");
    let src = View::new(x.to_vec());
    let sample = |rng: &mut R| {
        if cfg.toggles.downsampling {
            draw_sampling(x.len(), cfg.n_ds, rng)
        } else {
            spanning_sampling(x.len(), cfg.n_ds)
        }
    };
    let s1 = sample(rng);
    let s2 = sample(rng);
    let s3 = sample(rng);
    let positive_1 = positive(&src, s1, cfg, rng);
    let positive_2 = positive(&src, s2, cfg, rng);
    let neg = positive(&src, s3, cfg, rng);
    let negative = if cfg.toggles.reverse { reverse(&neg) } else { neg };
    let aligned_2 = positive(&src, s1, cfg, rng);
    ContrastiveViews {
        positive_1,
        positive_2,
        negative,
        aligned_2,
        samplings: [s1, s2, s3],
    }
}
