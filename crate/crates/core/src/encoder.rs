//! Spatial-temporal transformer encoder with unit-norm frame and sequence
//! features, and its momentum twin.
//!
//! Tokens are `(frame, joint)` pairs stored frame-major. Each token starts
//! as that joint's slice of an [`EnhancedFrame`], goes through a two-layer
//! perceptron embedding and a learned joint encoding, then through
//! pre-norm transformer blocks that attend over the joints of one frame
//! (spatial) and, after a learned time encoding is added, over the frames
//! of one joint (temporal). Joints are mean-pooled per frame and projected
//! to the feature width.

use crate::augment::{spanning_sampling, EnhancedFrame, View};
use crate::autodiff::{Graph, GroupLayout, ParamId, ParamSet, Var};
use crate::tensor::{l2_norm, Matrix};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("input mismatch: {0}")]
    Dimension(String),
    #[error("parameter layouts differ")]
    ShapeMismatch,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub spatial_layers: usize,
    pub temporal_layers: usize,
    pub feature_dim: usize,
    /// Hidden width of the feed-forward sublayers, as a multiple of `embed_dim`.
    pub ffn_mult: usize,
    /// Rows of the learned time encoding; longer views are rejected.
    pub max_frames: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            heads: 4,
            spatial_layers: 2,
            temporal_layers: 2,
            feature_dim: 128,
            ffn_mult: 2,
            max_frames: 512,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("feature_dim", self.feature_dim),
            ("ffn_mult", self.ffn_mult),
            ("max_frames", self.max_frames),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(EncoderError::Config(format!("{name} must be positive")));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(EncoderError::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// A unit-norm embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Scales `raw` to unit norm. A zero vector stays zero.
    pub fn normalized(mut raw: Vec<f64>) -> Self {
        let n = l2_norm(&raw);
        if n > 0.0 {
            raw.iter_mut().for_each(|v| *v /= n);
        }
        Self(raw)
    }

    /// Wraps values that are already unit norm.
    pub fn from_unit(values: Vec<f64>) -> Self {
        debug_assert!((l2_norm(&values) - 1.0).abs() < 1e-5, "not unit norm");
        Self(values)
    }

    /// Wraps values without any norm check.
    #[doc(hidden)]
    pub fn from_unit_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        crate::tensor::dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Shapes and wiring of the encoder, independent of any weight values.
#[derive(Clone, Debug)]
pub struct EncoderArch {
    pub config: EncoderConfig,
    pub joints: usize,
    /// Trajectory steps `n` on each side of a frame.
    pub steps: usize,
    embed: [ParamId; 4],
    joint_pos: ParamId,
    time_pos: ParamId,
    spatial: Vec<BlockIds>,
    temporal: Vec<BlockIds>,
    final_ln: [ParamId; 2],
    head: [ParamId; 4],
    template: ParamSet,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `T × feature_dim`, before normalisation.
    pub frame_raw: Var,
    /// `T × feature_dim`, unit rows.
    pub frame_features: Var,
    /// `1 × feature_dim`, unit norm, from the mean of `frame_raw`.
    pub sequence_feature: Var,
}

fn add_block(p: &mut ParamSet, prefix: &str, e: usize, hidden: usize) -> BlockIds {
    let z = |r, c| Matrix::zeros(r, c);
    let ones = Matrix::filled(1, e, 1.0);
    BlockIds {
        ln1_g: p.add(format!("{prefix}.ln1.gain"), ones.clone()),
        ln1_b: p.add(format!("{prefix}.ln1.bias"), z(1, e)),
        wq: p.add(format!("{prefix}.attn.wq"), z(e, e)),
        bq: p.add(format!("{prefix}.attn.bq"), z(1, e)),
        wk: p.add(format!("{prefix}.attn.wk"), z(e, e)),
        bk: p.add(format!("{prefix}.attn.bk"), z(1, e)),
        wv: p.add(format!("{prefix}.attn.wv"), z(e, e)),
        bv: p.add(format!("{prefix}.attn.bv"), z(1, e)),
        wo: p.add(format!("{prefix}.attn.wo"), z(e, e)),
        bo: p.add(format!("{prefix}.attn.bo"), z(1, e)),
        ln2_g: p.add(format!("{prefix}.ln2.gain"), ones),
        ln2_b: p.add(format!("{prefix}.ln2.bias"), z(1, e)),
        w1: p.add(format!("{prefix}.ffn.w1"), z(e, hidden)),
        b1: p.add(format!("{prefix}.ffn.b1"), z(1, hidden)),
        w2: p.add(format!("{prefix}.ffn.w2"), z(hidden, e)),
        b2: p.add(format!("{prefix}.ffn.b2"), z(1, e)),
    }
}

impl EncoderArch {
    pub fn new(config: EncoderConfig, joints: usize, steps: usize) -> Result<Self, EncoderError> {
        config.validate()?;
        if joints == 0 {
            return Err(EncoderError::Config("at least one joint required".into()));
        }
        let e = config.embed_dim;
        let input = (2 * steps + 1) * 3;
        let hidden = e * config.ffn_mult;
        let mut p = ParamSet::new();
        let embed = [
            p.add("embed.w1", Matrix::zeros(input, e)),
            p.add("embed.b1", Matrix::zeros(1, e)),
            p.add("embed.w2", Matrix::zeros(e, e)),
            p.add("embed.b2", Matrix::zeros(1, e)),
        ];
        let joint_pos = p.add("pos.joint", Matrix::zeros(joints, e));
        let time_pos = p.add("pos.time", Matrix::zeros(config.max_frames, e));
        let spatial = (0..config.spatial_layers)
            .map(|i| add_block(&mut p, &format!("spatial.{i}"), e, hidden))
            .collect();
        let temporal = (0..config.temporal_layers)
            .map(|i| add_block(&mut p, &format!("temporal.{i}"), e, hidden))
            .collect();
        let final_ln = [
            p.add("final_ln.gain", Matrix::filled(1, e, 1.0)),
            p.add("final_ln.bias", Matrix::zeros(1, e)),
        ];
        let head = [
            p.add("head.w1", Matrix::zeros(e, e)),
            p.add("head.b1", Matrix::zeros(1, e)),
            p.add("head.w2", Matrix::zeros(e, config.feature_dim)),
            p.add("head.b2", Matrix::zeros(1, config.feature_dim)),
        ];
        Ok(Self {
            config,
            joints,
            steps,
            embed,
            joint_pos,
            time_pos,
            spatial,
            temporal,
            final_ln,
            head,
            template: p,
        })
    }

    pub fn input_width(&self) -> usize {
        (2 * self.steps + 1) * 3
    }

    /// Fresh weights: He-scaled token embedding, Xavier for the other
    /// projections, N(0, 0.02) for position encodings, unit gains and zero
    /// biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamSet {
        let mut p = self.template.clone();
        for idx in 0..p.len() {
            let id = ParamId(idx);
            let name = p.name(id).to_owned();
            let (r, c) = p.get(id).shape();
            if name.starts_with("pos.") {
                *p.get_mut(id) = Matrix::randn(r, c, 0.02, rng);
            } else if name.starts_with("embed.w") {
                *p.get_mut(id) = Matrix::randn(r, c, (2.0 / r as f64).sqrt(), rng);
            } else if r > 1 && !name.contains(".ln") && !name.starts_with("final_ln") {
                *p.get_mut(id) = Matrix::xavier(r, c, rng);
            }
        }
        p
    }

    /// Checks that `params` fit this architecture.
    pub fn check_params(&self, params: &ParamSet) -> Result<(), EncoderError> {
        if self.template.same_layout(params) {
            Ok(())
        } else {
            Err(EncoderError::ShapeMismatch)
        }
    }

    pub fn joint_pos_id(&self) -> ParamId {
        self.joint_pos
    }

    pub fn time_pos_id(&self) -> ParamId {
        self.time_pos
    }

    /// Builds the `T·J × input_width` token matrix of a view.
    pub fn view_tokens(&self, view: &View) -> Result<Matrix, EncoderError> {
        if view.is_empty() {
            return Err(EncoderError::Dimension("empty view".into()));
        }
        if view.len() > self.config.max_frames {
            return Err(EncoderError::Dimension(format!(
                "view of {} frames exceeds max_frames {}",
                view.len(),
                self.config.max_frames
            )));
        }
        let w = self.input_width();
        let mut m = Matrix::zeros(view.len() * self.joints, w);
        for (t, f) in view.frames.iter().enumerate() {
            if f.num_joints() != self.joints || f.joint_width() != w {
                return Err(EncoderError::Dimension(format!(
                    "frame {t} has {} joints x {} inputs, encoder expects {} x {w}",
                    f.num_joints(),
                    f.joint_width(),
                    self.joints
                )));
            }
            for j in 0..self.joints {
                m.row_mut(t * self.joints + j).copy_from_slice(f.joint_features(j));
            }
        }
        Ok(m)
    }

    fn block(&self, g: &mut Graph, p: &ParamSet, x: Var, ids: &BlockIds, layout: GroupLayout) -> Var {
        let (g1, b1) = (g.param(p, ids.ln1_g), g.param(p, ids.ln1_b));
        let h = g.layer_norm(x, g1, b1);
        let (wq, bq) = (g.param(p, ids.wq), g.param(p, ids.bq));
        let (wk, bk) = (g.param(p, ids.wk), g.param(p, ids.bk));
        let (wv, bv) = (g.param(p, ids.wv), g.param(p, ids.bv));
        let q = g.linear(h, wq, bq);
        let k = g.linear(h, wk, bk);
        let v = g.linear(h, wv, bv);
        let a = g.attention(q, k, v, layout, self.config.heads);
        let (wo, bo) = (g.param(p, ids.wo), g.param(p, ids.bo));
        let a = g.linear(a, wo, bo);
        let x = g.add(x, a);
        let (g2, b2) = (g.param(p, ids.ln2_g), g.param(p, ids.ln2_b));
        let h = g.layer_norm(x, g2, b2);
        let (w1, bb1) = (g.param(p, ids.w1), g.param(p, ids.b1));
        let (w2, bb2) = (g.param(p, ids.w2), g.param(p, ids.b2));
        let h = g.linear(h, w1, bb1);
        let h = g.gelu(h);
        let h = g.linear(h, w2, bb2);
        g.add(x, h)
    }

    /// Records a forward pass of `view` on `g`.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, view: &View) -> Result<ForwardVars, EncoderError> {
        let tokens = self.view_tokens(view)?;
        let (t_len, j) = (view.len(), self.joints);
        let x = g.input(tokens);
        let [w1, b1, w2, b2] = self.embed.map(|id| g.param(params, id));
        let h = g.linear(x, w1, b1);
        let h = g.gelu(h);
        let mut h = g.linear(h, w2, b2);
        let jp = g.param(params, self.joint_pos);
        h = g.add_indexed(h, jp, (0..t_len * j).map(|r| r % j).collect());
        let spatial = GroupLayout {
            groups: t_len,
            len: j,
            group_stride: j,
            item_stride: 1,
        };
        for ids in &self.spatial {
            h = self.block(g, params, h, ids, spatial);
        }
        let tp = g.param(params, self.time_pos);
        h = g.add_indexed(h, tp, (0..t_len * j).map(|r| r / j).collect());
        let temporal = GroupLayout {
            groups: j,
            len: t_len,
            group_stride: 1,
            item_stride: j,
        };
        for ids in &self.temporal {
            h = self.block(g, params, h, ids, temporal);
        }
        let [lg, lb] = self.final_ln.map(|id| g.param(params, id));
        h = g.layer_norm(h, lg, lb);
        let pooled = g.group_mean(h, j);
        let [hw1, hb1, hw2, hb2] = self.head.map(|id| g.param(params, id));
        let z = g.linear(pooled, hw1, hb1);
        let z = g.gelu(z);
        let frame_raw = g.linear(z, hw2, hb2);
        let frame_features = g.normalize_rows(frame_raw);
        let mean = g.mean_rows(frame_raw);
        let sequence_feature = g.normalize_rows(mean);
        Ok(ForwardVars {
            frame_raw,
            frame_features,
            sequence_feature,
        })
    }
}

/// Features of one encoded view.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub frames: Vec<FeatureVector>,
    pub sequence: FeatureVector,
}

/// Per-frame and sequence features of a complete sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEmbedding {
    pub frames: Vec<FeatureVector>,
    pub sequence: FeatureVector,
}

pub fn rows_to_features(m: &Matrix) -> Vec<FeatureVector> {
    (0..m.rows()).map(|r| FeatureVector(m.row(r).to_vec())).collect()
}

/// An architecture together with one set of weights.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub arch: EncoderArch,
    pub params: ParamSet,
}

impl Encoder {
    pub fn new(arch: EncoderArch, params: ParamSet) -> Result<Self, EncoderError> {
        arch.check_params(&params)?;
        Ok(Self { arch, params })
    }

    pub fn random<R: Rng + ?Sized>(arch: EncoderArch, rng: &mut R) -> Self {
        let params = arch.init_params(rng);
        Self { arch, params }
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.config.feature_dim
    }

    /// Encodes one view into `T` frame features and one sequence feature.
    pub fn encode(&self, view: &View) -> Result<Encoded, EncoderError> {
        let mut g = Graph::new();
        let out = self.arch.forward(&mut g, &self.params, view)?;
        Ok(Encoded {
            frames: rows_to_features(g.value(out.frame_features)),
            sequence: FeatureVector(g.value(out.sequence_feature).row(0).to_vec()),
        })
    }

    /// Embeds a whole enhanced sequence.
    ///
    /// The sequence feature comes from the evenly spread view of
    /// `min(window, T)` frames. Frame features come from consecutive windows
    /// of `window` frames, the last one aligned to the sequence end.
    pub fn embed_sequence(&self, x: &[EnhancedFrame], window: usize) -> Result<SequenceEmbedding, EncoderError> {
        if x.is_empty() {
            return Err(EncoderError::Dimension("empty sequence".into()));
        }
        let window = window.clamp(1, self.arch.config.max_frames);
        let s = spanning_sampling(x.len(), window);
        let spread = View::new((0..s.count).map(|k| x[s.offset - 1 + k * s.interval].clone()).collect());
        let sequence = self.encode(&spread)?.sequence;
        let mut frames: Vec<Option<FeatureVector>> = vec![None; x.len()];
        let mut start = 0;
        loop {
            let begin = start.min(x.len().saturating_sub(window));
            let end = (begin + window).min(x.len());
            let enc = self.encode(&View::new(x[begin..end].to_vec()))?;
            for (i, f) in enc.frames.into_iter().enumerate() {
                let slot = &mut frames[begin + i];
                if slot.is_none() {
                    *slot = Some(f);
                }
            }
            if end == x.len() {
                break;
            }
            start += window;
        }
        Ok(SequenceEmbedding {
            frames: frames.into_iter().map(|f| f.expect("every frame covered")).collect(),
            sequence,
        })
    }

    /// Zeroes the joint and time encodings.
    pub fn zero_position_encodings(&mut self) {
        for id in [self.arch.joint_pos, self.arch.time_pos] {
            self.params.get_mut(id).as_mut_slice().fill(0.0);
        }
    }
}

/// Native and momentum weights of the contrastive encoder pair.
#[derive(Clone, Debug)]
pub struct MomentumState {
    pub theta_q: ParamSet,
    pub theta_k: ParamSet,
    pub alpha: f64,
}

impl MomentumState {
    /// The momentum encoder starts as an exact copy of the native one.
    pub fn new(theta_q: ParamSet, alpha: f64) -> Result<Self, EncoderError> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(EncoderError::Config(format!("momentum alpha {alpha} not in [0, 1)")));
        }
        Ok(Self {
            theta_k: theta_q.clone(),
            theta_q,
            alpha,
        })
    }

    /// `theta_k <- alpha * theta_k + (1 - alpha) * theta_q`
    pub fn update(&mut self) -> Result<(), EncoderError> {
        if !self.theta_k.same_layout(&self.theta_q) {
            return Err(EncoderError::ShapeMismatch);
        }
        let a = self.alpha;
        for (k, q) in self.theta_k.values_mut().iter_mut().zip(self.theta_q.values()) {
            for (kv, qv) in k.as_mut_slice().iter_mut().zip(q.as_slice()) {
                *kv = a * *kv + (1.0 - a) * qv;
            }
        }
        Ok(())
    }
}

/// Functional form of [`MomentumState::update`].
pub fn momentum_update(mut state: MomentumState) -> Result<MomentumState, EncoderError> {
    state.update()?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::enhance_with_steps;
    use crate::data::{MotionSequence, SkeletonFrame};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 8,
            heads: 2,
            spatial_layers: 1,
            temporal_layers: 1,
            feature_dim: 8,
            ffn_mult: 2,
            max_frames: 16,
        }
    }

    fn sequence(t: usize, j: usize, seed: u64) -> MotionSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MotionSequence {
            id: "s".into(),
            fps: 30.0,
            frames: (0..t)
                .map(|_| SkeletonFrame::new((0..j).map(|_| [rng.random(), rng.random(), rng.random()]).collect()))
                .collect(),
        }
    }

    fn view(t: usize, j: usize, seed: u64) -> View {
        View::new(enhance_with_steps(&sequence(t, j, seed), 1, 1))
    }

    fn projected_outputs(arch: &EncoderArch, params: &ParamSet, v: &View, w_frames: &Matrix, w_seq: &Matrix) -> f64 {
        let mut g = Graph::new();
        let out = arch.forward(&mut g, params, v).unwrap();
        let dot = |a: &Matrix, b: &Matrix| a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum::<f64>();
        dot(g.value(out.frame_features), w_frames) + dot(g.value(out.sequence_feature), w_seq)
    }

    #[test]
    fn output_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let arch = EncoderArch::new(tiny(), 3, 1).unwrap();
        let mut params = arch.init_params(&mut rng);
        let v = view(4, 3, 2);
        let w_frames = Matrix::randn(4, 8, 1.0, &mut rng);
        let w_seq = Matrix::randn(1, 8, 1.0, &mut rng);
        let mut g = Graph::new();
        let out = arch.forward(&mut g, &params, &v).unwrap();
        let grads = g
            .backward(&[(out.frame_features, w_frames.clone()), (out.sequence_feature, w_seq.clone())])
            .param_grads(&g, &params);
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        for p in 0..params.len() {
            for i in 0..params.values()[p].len() {
                let orig = params.values()[p].as_slice()[i];
                params.values_mut()[p].as_mut_slice()[i] = orig + h;
                let up = projected_outputs(&arch, &params, &v, &w_frames, &w_seq);
                params.values_mut()[p].as_mut_slice()[i] = orig - h;
                let down = projected_outputs(&arch, &params, &v, &w_frames, &w_seq);
                params.values_mut()[p].as_mut_slice()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = grads[p].as_slice()[i];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-2);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn outputs_are_unit_norm_with_expected_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::random(EncoderArch::new(tiny(), 3, 1).unwrap(), &mut rng);
        let out = enc.encode(&view(5, 3, 1)).unwrap();
        assert_eq!(out.frames.len(), 5);
        for f in out.frames.iter().chain(std::iter::once(&out.sequence)) {
            assert!((f.norm() - 1.0).abs() < 1e-5);
            assert_eq!(f.dim(), 8);
        }
        assert_eq!(enc.encode(&view(5, 3, 1)).unwrap(), out);
    }

    #[test]
    fn mismatched_input_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::random(EncoderArch::new(tiny(), 3, 1).unwrap(), &mut rng);
        assert!(matches!(enc.encode(&view(4, 2, 1)), Err(EncoderError::Dimension(_))));
        assert!(enc.encode(&View::new(vec![])).is_err());
        assert!(enc.encode(&view(17, 3, 1)).is_err());
        assert!(EncoderArch::new(EncoderConfig { heads: 3, ..tiny() }, 3, 1).is_err());
    }

    #[test]
    fn embed_sequence_covers_every_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::random(EncoderArch::new(tiny(), 3, 1).unwrap(), &mut rng);
        let x = enhance_with_steps(&sequence(23, 3, 2), 1, 1);
        let e = enc.embed_sequence(&x, 8).unwrap();
        assert_eq!(e.frames.len(), 23);
        let direct = enc.encode(&View::new(x[..8].to_vec())).unwrap();
        assert_eq!(e.frames[..8], direct.frames[..]);
    }

    #[test]
    fn joint_permutation_invariance_without_position_encodings() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut enc = Encoder::random(EncoderArch::new(tiny(), 4, 1).unwrap(), &mut rng);
        enc.zero_position_encodings();
        let seq = sequence(6, 4, 3);
        let mut permuted = seq.clone();
        for f in &mut permuted.frames {
            f.joints = vec![f.joints[2], f.joints[0], f.joints[3], f.joints[1]];
        }
        let a = enc.encode(&View::new(enhance_with_steps(&seq, 1, 1))).unwrap();
        let b = enc.encode(&View::new(enhance_with_steps(&permuted, 1, 1))).unwrap();
        for (x, y) in a.sequence.as_slice().iter().zip(b.sequence.as_slice()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn momentum_update_examples() {
        let mut q = ParamSet::new();
        q.add("w", Matrix::filled(1, 1, 0.0));
        let mut k = ParamSet::new();
        k.add("w", Matrix::filled(1, 1, 1.0));
        let state = MomentumState {
            theta_q: q.clone(),
            theta_k: k.clone(),
            alpha: 0.999,
        };
        let s = momentum_update(state).unwrap();
        assert!((s.theta_k.values()[0].get(0, 0) - 0.999).abs() < 1e-12);
        assert_eq!(s.theta_q, q);

        let s = momentum_update(MomentumState {
            theta_q: q.clone(),
            theta_k: k.clone(),
            alpha: 0.0,
        })
        .unwrap();
        assert_eq!(s.theta_k, q);

        let s = momentum_update(MomentumState::new(k.clone(), 0.5).unwrap()).unwrap();
        assert_eq!(s.theta_k, k);

        let mut bad = ParamSet::new();
        bad.add("w", Matrix::zeros(2, 1));
        let err = momentum_update(MomentumState {
            theta_q: q,
            theta_k: bad,
            alpha: 0.5,
        });
        assert!(matches!(err, Err(EncoderError::ShapeMismatch)));
        assert!(MomentumState::new(k, 1.0).is_err());
    }

    #[test]
    fn momentum_converges_geometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let arch = EncoderArch::new(tiny(), 3, 1).unwrap();
        let q = arch.init_params(&mut rng);
        let mut state = MomentumState::new(q.clone(), 0.9).unwrap();
        state.theta_k = arch.init_params(&mut rng);
        let gap = |s: &MomentumState| -> Vec<f64> {
            s.theta_k
                .values()
                .iter()
                .zip(s.theta_q.values())
                .flat_map(|(a, b)| a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x - y).collect::<Vec<_>>())
                .collect()
        };
        let mut prev = gap(&state);
        for _ in 0..5 {
            state.update().unwrap();
            let cur = gap(&state);
            for (c, p) in cur.iter().zip(&prev) {
                assert!((c - 0.9 * p).abs() < 1e-12);
            }
            prev = cur;
        }
        assert_eq!(state.theta_q, q);
    }
}
