//! Procedural skeleton motions for tests and desk-scale experiments.
//!
//! A 15-joint skeleton is posed by limb angles that follow per-class periodic
//! patterns. Every sequence draws its own frequency, amplitude, phase, body
//! scale, heading, position and sensor noise, so classes overlap in raw
//! coordinates but keep distinct motion signatures.

use crate::data::{LabelMatrix, MotionDataset, MotionSequence, NormalizeConfig, SkeletonFrame, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

pub const JOINT_NAMES: [&str; 15] = [
    "pelvis",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
];

pub const PARENTS: [i64; 15] = [-1, 0, 1, 1, 3, 4, 1, 6, 7, 0, 9, 10, 0, 12, 13];

/// Root and the hip pair whose direction defines the facing.
pub const ROOT: usize = 0;
pub const FACING: (usize, usize) = (12, 9);

/// Playback speed of a sequence is `base · s^u` with `u ~ U[-1, 1]`, so
/// neighbouring classes overlap in tempo and only pose tells them apart.
pub const TEMPO_SPREAD: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionClass {
    Walk,
    Jog,
    WaveLeft,
    WaveRight,
    Jump,
    Squat,
    Punch,
    Kick,
}

impl ActionClass {
    pub const ALL: [ActionClass; 8] = [
        ActionClass::Walk,
        ActionClass::Jog,
        ActionClass::WaveLeft,
        ActionClass::WaveRight,
        ActionClass::Jump,
        ActionClass::Squat,
        ActionClass::Punch,
        ActionClass::Kick,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionClass::Walk => "walk",
            ActionClass::Jog => "jog",
            ActionClass::WaveLeft => "wave_left",
            ActionClass::WaveRight => "wave_right",
            ActionClass::Jump => "jump",
            ActionClass::Squat => "squat",
            ActionClass::Punch => "punch",
            ActionClass::Kick => "kick",
        }
    }

    /// Base cycle frequency in Hz.
    fn frequency(self) -> f64 {
        match self {
            ActionClass::Walk => 0.9,
            ActionClass::Jog => 1.4,
            ActionClass::WaveLeft | ActionClass::WaveRight => 1.5,
            ActionClass::Jump => 0.8,
            ActionClass::Squat => 0.5,
            ActionClass::Punch => 1.2,
            ActionClass::Kick => 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub sequences: usize,
    pub fps: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Relative class frequencies, one per entry of [`ActionClass::ALL`].
    pub class_weights: Vec<f64>,
    /// Standard deviation of additive coordinate noise, in metres.
    pub noise: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            sequences: 200,
            fps: 120.0,
            min_frames: 240,
            max_frames: 360,
            class_weights: vec![0.30, 0.20, 0.14, 0.10, 0.09, 0.07, 0.06, 0.04],
            noise: 0.01,
            seed: 0,
        }
    }
}

/// A generated dataset with its whole-sequence ground truth.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub dataset: MotionDataset,
    pub classes: BTreeMap<String, usize>,
    pub labels: BTreeMap<String, LabelMatrix>,
}

impl Benchmark {
    /// Classes in sequence-id order.
    pub fn class_vector(&self) -> Vec<usize> {
        self.dataset.sequences.iter().map(|s| self.classes[&s.id]).collect()
    }
}

/// Normalisation anchors for the synthetic skeleton: pelvis root, heading
/// from the right to the left hip and the parent bones for scale.
pub fn normalize_config() -> NormalizeConfig {
    NormalizeConfig {
        root_joint: ROOT,
        facing_joints: FACING,
        bones: Some(
            PARENTS
                .iter()
                .enumerate()
                .filter(|(_, &p)| p >= 0)
                .map(|(c, &p)| (p as usize, c))
                .collect(),
        ),
    }
}

/// Per-sequence style drawn once.
#[derive(Clone, Copy, Debug)]
struct Style {
    freq: f64,
    amp: f64,
    phase: f64,
    scale: f64,
    yaw: f64,
    origin: [f64; 2],
    lean: f64,
}

/// Limb angles of one pose, in radians. Swing is forward rotation about the
/// lateral axis, abduction is outward rotation, flex bends the distal segment
/// forward in the swing plane.
#[derive(Clone, Copy, Debug, Default)]
struct Pose {
    root: Vec3,
    l_arm: (f64, f64, f64),
    r_arm: (f64, f64, f64),
    l_leg: (f64, f64),
    r_leg: (f64, f64),
    lean: f64,
}

fn pose(class: ActionClass, t: f64, s: &Style) -> Pose {
    let ph = 2.0 * PI * s.freq * t + s.phase;
    let a = s.amp;
    let mut p = Pose {
        root: [0.0, 1.0, 0.0],
        l_arm: (0.0, 0.12, 0.1),
        r_arm: (0.0, 0.12, 0.1),
        lean: s.lean,
        ..Pose::default()
    };
    match class {
        ActionClass::Walk => {
            let sw = 0.45 * a * ph.sin();
            p.l_leg = (sw, 0.35 * a * (ph + 0.6 * PI).sin().max(0.0));
            p.r_leg = (-sw, 0.35 * a * (ph - 0.4 * PI).sin().max(0.0));
            p.l_arm = (-0.35 * a * ph.sin(), 0.1, 0.2);
            p.r_arm = (0.35 * a * ph.sin(), 0.1, 0.2);
            p.root = [0.0, 1.0 + 0.02 * (2.0 * ph).cos(), 1.1 * s.freq * t];
        }
        ActionClass::Jog => {
            let sw = 0.8 * a * ph.sin();
            p.l_leg = (sw, 0.9 * a * (ph + 0.5 * PI).sin().max(0.0) + 0.2);
            p.r_leg = (-sw, 0.9 * a * (ph - 0.5 * PI).sin().max(0.0) + 0.2);
            p.l_arm = (-0.6 * a * ph.sin(), 0.15, 1.4);
            p.r_arm = (0.6 * a * ph.sin(), 0.15, 1.4);
            p.root = [0.0, 0.98 + 0.05 * (2.0 * ph).cos(), 2.2 * s.freq * t];
            p.lean += 0.15;
        }
        ActionClass::WaveLeft | ActionClass::WaveRight => {
            let arm = (0.3, 2.5 + 0.15 * a * ph.sin(), 0.6 + 0.5 * a * ph.sin());
            if class == ActionClass::WaveLeft {
                p.l_arm = arm;
            } else {
                p.r_arm = arm;
            }
        }
        ActionClass::Jump => {
            let c = ph.sin();
            let crouch = (-c).max(0.0);
            let air = c.max(0.0);
            p.l_leg = (0.5 * a * crouch, 1.1 * a * crouch);
            p.r_leg = p.l_leg;
            p.root = [0.0, 1.0 - 0.25 * a * crouch + 0.35 * a * air, 0.0];
            let arms = (-0.6 * crouch + 2.6 * air * a, 0.2, 0.2);
            p.l_arm = arms;
            p.r_arm = arms;
        }
        ActionClass::Squat => {
            let depth = 0.5 * (1.0 - ph.cos()) * a;
            p.l_leg = (0.9 * depth, 1.7 * depth);
            p.r_leg = p.l_leg;
            p.root = [0.0, 1.0 - 0.4 * depth, -0.1 * depth];
            p.l_arm = (1.5 * depth.min(1.0), 0.1, 0.0);
            p.r_arm = p.l_arm;
            p.lean += 0.35 * depth;
        }
        ActionClass::Punch => {
            let l = (0.5 + 0.5 * ph.sin()).powi(2) * a;
            let r = (0.5 - 0.5 * ph.sin()).powi(2) * a;
            p.l_arm = (0.5 + 1.0 * l, 0.1, 2.0 * (1.0 - l.min(1.0)));
            p.r_arm = (0.5 + 1.0 * r, 0.1, 2.0 * (1.0 - r.min(1.0)));
        }
        ActionClass::Kick => {
            let k = ph.sin().max(0.0).powi(2) * a;
            p.r_leg = (1.3 * k, 0.9 * (1.0 - k).max(0.0) * (k > 0.05) as u8 as f64);
            p.l_leg = (-0.1 * k, 0.15 * k);
            p.l_arm = (-0.4 * k, 0.5, 0.3);
            p.r_arm = (0.3 * k, 0.5, 0.3);
            p.lean -= 0.2 * k;
        }
    }
    p
}

fn limb_dir(swing: f64, abduction: f64, side: f64) -> Vec3 {
    [side * abduction.sin() * swing.cos(), -abduction.cos() * swing.cos(), swing.sin()]
}

fn add(a: Vec3, b: Vec3, k: f64) -> Vec3 {
    [a[0] + k * b[0], a[1] + k * b[1], a[2] + k * b[2]]
}

/// Joint positions for a pose in body coordinates: y up, facing +z, left +x.
fn skeleton(p: &Pose) -> Vec<Vec3> {
    let pelvis = p.root;
    let up = [0.0, p.lean.cos(), p.lean.sin()];
    let neck = add(pelvis, up, 0.5);
    let head = add(neck, up, 0.2);
    let mut j = vec![[0.0; 3]; 15];
    j[0] = pelvis;
    j[1] = neck;
    j[2] = head;
    for (side, arm, base) in [(1.0, p.l_arm, 3), (-1.0, p.r_arm, 6)] {
        let shoulder = add(add(neck, [side * 0.2, 0.0, 0.0], 1.0), up, -0.05);
        let (swing, abd, flex) = arm;
        let elbow = add(shoulder, limb_dir(swing, abd, side), 0.28);
        let wrist = add(elbow, limb_dir(swing + flex, abd, side), 0.26);
        j[base] = shoulder;
        j[base + 1] = elbow;
        j[base + 2] = wrist;
    }
    for (side, leg, base) in [(1.0, p.l_leg, 9), (-1.0, p.r_leg, 12)] {
        let hip = add(pelvis, [side * 0.1, -0.05, 0.0], 1.0);
        let (swing, flex) = leg;
        let knee = add(hip, limb_dir(swing, 0.03, side), 0.45);
        let ankle = add(knee, limb_dir(swing - flex, 0.03, side), 0.42);
        j[base] = hip;
        j[base + 1] = knee;
        j[base + 2] = ankle;
    }
    j
}

fn place(joints: &mut [Vec3], s: &Style) {
    let (sy, cy) = s.yaw.sin_cos();
    for q in joints.iter_mut() {
        let [x, y, z] = *q;
        *q = [
            s.scale * (cy * x + sy * z) + s.origin[0],
            s.scale * y,
            s.scale * (-sy * x + cy * z) + s.origin[1],
        ];
    }
}

fn draw_style<R: Rng + ?Sized>(class: ActionClass, rng: &mut R) -> Style {
    Style {
        freq: class.frequency() * (rng.random_range(-1.0..1.0) * TEMPO_SPREAD.ln()).exp(),
        amp: rng.random_range(0.8..1.2),
        phase: rng.random_range(0.0..2.0 * PI),
        scale: rng.random_range(0.85..1.15),
        yaw: rng.random_range(0.0..2.0 * PI),
        origin: [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
        lean: rng.random_range(-0.05..0.05),
    }
}

/// One sequence of `class`.
pub fn generate_sequence<R: Rng + ?Sized>(id: &str, class: ActionClass, frames: usize, fps: f64, noise: f64, rng: &mut R) -> MotionSequence {
    let style = draw_style(class, rng);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let frames = (0..frames)
        .map(|k| {
            let mut j = skeleton(&pose(class, k as f64 / fps, &style));
            place(&mut j, &style);
            if noise > 0.0 {
                for q in j.iter_mut() {
                    for c in q.iter_mut() {
                        *c += normal.sample(rng);
                    }
                }
            }
            SkeletonFrame::new(j)
        })
        .collect();
    MotionSequence {
        id: id.to_owned(),
        fps,
        frames,
    }
}

/// Draws class counts proportional to the weights, with every class present
/// at least once when there are enough sequences.
fn class_counts(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let m = weights.len();
    let mut counts: Vec<usize> = weights.iter().map(|w| (w / total * n as f64).floor() as usize).collect();
    if n >= m {
        counts.iter_mut().for_each(|c| *c = (*c).max(1));
    }
    let mut i = 0;
    while counts.iter().sum::<usize>() < n {
        counts[i % m] += 1;
        i += 1;
    }
    while counts.iter().sum::<usize>() > n {
        let k = (0..m).max_by_key(|&k| counts[k]).expect("non-empty");
        counts[k] -= 1;
    }
    counts
}

/// Generates the benchmark. Sequence ids are `seq_000`, `seq_001`, ... in a
/// shuffled class order, so ids carry no class information.
pub fn generate(cfg: &BenchmarkConfig) -> Benchmark {
    let classes = &ActionClass::ALL[..cfg.class_weights.len().min(ActionClass::ALL.len())];
    let counts = class_counts(cfg.sequences, &cfg.class_weights[..classes.len()]);
    let mut assignment: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c, k)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rand::seq::SliceRandom::shuffle(assignment.as_mut_slice(), &mut rng);
    let m = classes.len();
    let mut sequences = Vec::with_capacity(cfg.sequences);
    let mut class_map = BTreeMap::new();
    let mut labels = BTreeMap::new();
    for (i, &c) in assignment.iter().enumerate() {
        let id = format!("seq_{i:03}");
        let frames = rng.random_range(cfg.min_frames..=cfg.max_frames.max(cfg.min_frames));
        let seq = generate_sequence(&id, classes[c], frames, cfg.fps, cfg.noise, &mut rng);
        let mut row = vec![0u8; m];
        row[c] = 1;
        labels.insert(
            id.clone(),
            LabelMatrix {
                sequence_id: id.clone(),
                labels: vec![row; frames],
            },
        );
        class_map.insert(id, c);
        sequences.push(seq);
    }
    Benchmark {
        dataset: MotionDataset {
            sequences,
            class_names: classes.iter().map(|c| c.name().to_owned()).collect(),
            joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            parents: Some(PARENTS.to_vec()),
            fps: cfg.fps,
        },
        classes: class_map,
        labels,
    }
}

/// Two-class set of arm circles traced clockwise (class 0) or
/// counter-clockwise (class 1) in the frontal plane.
pub fn arm_circles(n: usize, frames: usize, fps: f64, seed: u64) -> Benchmark {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::new();
    let mut class_map = BTreeMap::new();
    let mut labels = BTreeMap::new();
    for i in 0..n {
        let c = i % 2;
        let id = format!("circle_{i:03}");
        let mut style = draw_style(ActionClass::WaveLeft, &mut rng);
        style.freq = rng.random_range(0.8..1.2);
        let dir = if c == 0 { -1.0 } else { 1.0 };
        let normal = Normal::new(0.0, 0.005).expect("finite noise");
        let fr = (0..frames)
            .map(|k| {
                let ph = dir * 2.0 * PI * style.freq * k as f64 / fps + style.phase;
                let mut p = Pose {
                    root: [0.0, 1.0, 0.0],
                    l_arm: (0.0, 0.1, 0.1),
                    r_arm: (0.9 + 0.5 * ph.sin(), 0.9 + 0.5 * ph.cos(), 0.1),
                    ..Pose::default()
                };
                p.lean = style.lean;
                let mut j = skeleton(&p);
                place(&mut j, &style);
                for q in j.iter_mut() {
                    for v in q.iter_mut() {
                        *v += normal.sample(&mut rng);
                    }
                }
                SkeletonFrame::new(j)
            })
            .collect();
        let mut row = vec![0u8; 2];
        row[c] = 1;
        labels.insert(
            id.clone(),
            LabelMatrix {
                sequence_id: id.clone(),
                labels: vec![row; frames],
            },
        );
        class_map.insert(id.clone(), c);
        sequences.push(MotionSequence { id, fps, frames: fr });
    }
    Benchmark {
        dataset: MotionDataset {
            sequences,
            class_names: vec!["clockwise".into(), "counter_clockwise".into()],
            joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            parents: Some(PARENTS.to_vec()),
            fps,
        },
        classes: class_map,
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_shape_and_determinism() {
        let cfg = BenchmarkConfig {
            sequences: 40,
            ..BenchmarkConfig::default()
        };
        let a = generate(&cfg);
        let b = generate(&cfg);
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.dataset.len(), 40);
        a.dataset.validate().unwrap();
        for s in &a.dataset.sequences {
            assert!((240..=360).contains(&s.len()));
            assert_eq!(s.num_joints(), 15);
            a.labels[&s.id].validate(s.len(), 8).unwrap();
        }
        let mut per_class = vec![0; 8];
        for c in a.classes.values() {
            per_class[*c] += 1;
        }
        assert!(per_class.iter().all(|&k| k >= 1));
        assert!(per_class[0] > per_class[7]);
    }

    #[test]
    fn counts_follow_weights() {
        assert_eq!(class_counts(200, &[0.30, 0.20, 0.14, 0.10, 0.09, 0.07, 0.06, 0.04]), vec![60, 40, 28, 20, 18, 14, 12, 8]);
        assert_eq!(class_counts(8, &[0.9, 0.1]).iter().sum::<usize>(), 8);
        assert_eq!(class_counts(3, &[1.0; 5]).iter().sum::<usize>(), 3);
    }

    #[test]
    fn rest_pose_bones_have_fixed_length() {
        let s = Style {
            freq: 1.0,
            amp: 1.0,
            phase: 0.0,
            scale: 1.0,
            yaw: 0.0,
            origin: [0.0, 0.0],
            lean: 0.0,
        };
        for class in ActionClass::ALL {
            for k in 0..50 {
                let j = skeleton(&pose(class, k as f64 * 0.05, &s));
                let bone = |a: usize, b: usize| crate::tensor::l2_norm(&[j[a][0] - j[b][0], j[a][1] - j[b][1], j[a][2] - j[b][2]]);
                assert!((bone(3, 4) - 0.28).abs() < 1e-9 && (bone(4, 5) - 0.26).abs() < 1e-9);
                assert!((bone(9, 10) - 0.45).abs() < 1e-9 && (bone(13, 14) - 0.42).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn arm_circles_alternate_classes() {
        let b = arm_circles(6, 50, 60.0, 1);
        assert_eq!(b.class_vector(), vec![0, 1, 0, 1, 0, 1]);
        b.dataset.validate().unwrap();
    }
}
