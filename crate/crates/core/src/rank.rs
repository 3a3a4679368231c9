//! Representativeness ranking.
//!
//! Starting from one random sequence, each round trains a fresh binary
//! discriminator to tell ranked sequences (class 0) from unranked ones
//! (class 1) and moves the unranked sequence it most confidently places in
//! class 1 to the ranked set. Exact farthest-point sampling is provided as an
//! oracle for the same greedy idea.

use crate::data::MotionDataset;
use crate::encoder::FeatureVector;
use crate::mlp::Mlp;
use crate::optim::Adam;
use crate::tensor::{l2_norm, Matrix};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RankError {
    #[error("no features to rank")]
    Empty,
    #[error("duplicate sequence id {0}")]
    DuplicateId(String),
    #[error("feature of {id} has dimension {found}, expected {expected}")]
    Dimension { id: String, expected: usize, found: usize },
    #[error("unknown sequence id {0}")]
    UnknownId(String),
    #[error("budget {0} is out of range for {1} sequences")]
    Budget(String, usize),
    #[error("invalid discriminator config: {0}")]
    Config(String),
}

/// Sequence ids with one feature row each, sorted by id.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    ids: Vec<String>,
    rows: Matrix,
}

impl FeatureTable {
    pub fn new(mut entries: Vec<(String, Vec<f64>)>) -> Result<Self, RankError> {
        if entries.is_empty() {
            return Err(RankError::Empty);
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(RankError::DuplicateId(w[0].0.clone()));
            }
        }
        let dim = entries[0].1.len();
        if let Some((id, f)) = entries.iter().find(|(_, f)| f.len() != dim) {
            return Err(RankError::Dimension {
                id: id.clone(),
                expected: dim,
                found: f.len(),
            });
        }
        let mut data = Vec::with_capacity(entries.len() * dim);
        let ids = entries
            .into_iter()
            .map(|(id, f)| {
                data.extend(f);
                id
            })
            .collect::<Vec<_>>();
        Ok(Self {
            rows: Matrix::from_vec(ids.len(), dim, data),
            ids,
        })
    }

    pub fn from_features(map: &BTreeMap<String, FeatureVector>) -> Result<Self, RankError> {
        Self::new(map.iter().map(|(k, v)| (k.clone(), v.as_slice().to_vec())).collect())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.binary_search_by(|p| p.as_str().cmp(id)).ok()
    }
}

/// Flattened raw coordinates resampled to `frames` evenly spaced frames, so
/// every sequence yields a vector of the same length. Nearest-frame picks.
pub fn raw_features(ds: &MotionDataset, frames: usize) -> Result<FeatureTable, RankError> {
    let frames = frames.max(1);
    let entries = ds
        .sequences
        .iter()
        .map(|s| {
            let t = s.frames.len();
            let mut v = Vec::with_capacity(frames * s.num_joints() * 3);
            for k in 0..frames {
                let idx = if frames == 1 || t == 1 {
                    0
                } else {
                    ((k as f64 * (t - 1) as f64 / (frames - 1) as f64).round() as usize).min(t - 1)
                };
                for j in &s.frames[idx].joints {
                    v.extend_from_slice(j);
                }
            }
            (s.id.clone(), v)
        })
        .collect();
    FeatureTable::new(entries)
}

/// Ranked sequence ids. `scores[i]` is the selection score of `order[i]`;
/// the randomly drawn first element has none.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub seed: u64,
    pub order: Vec<String>,
    pub scores: Vec<Option<f64>>,
}

impl Ranking {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Whether `order` lists every id of `ids` exactly once.
    pub fn is_permutation_of(&self, ids: &[String]) -> bool {
        let set: HashSet<&String> = self.order.iter().collect();
        set.len() == self.order.len() && self.order.len() == ids.len() && ids.iter().all(|i| set.contains(i))
    }

    /// 1-based rank position of every id.
    pub fn positions(&self) -> BTreeMap<String, usize> {
        self.order.iter().enumerate().map(|(i, id)| (id.clone(), i + 1)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    /// Widths of the two hidden layers; input and output widths are fixed by
    /// the features and the binary target.
    pub hidden: [usize; 2],
    pub epochs: usize,
    pub learning_rate: f64,
    /// Sequences moved to the ranked set per round.
    pub batch_add: usize,
    /// Rows drawn per class in each epoch. Caps the work of a round so that it
    /// does not grow with the dataset.
    pub samples_per_class: usize,
    pub batch_size: usize,
    /// Continue from the previous round's weights instead of reinitialising.
    pub warm_start: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            hidden: [64, 32],
            epochs: 20,
            learning_rate: 0.01,
            batch_add: 1,
            samples_per_class: 128,
            batch_size: 64,
            warm_start: false,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<(), RankError> {
        if self.batch_add == 0 {
            return Err(RankError::Config("batch_add must be at least 1".into()));
        }
        if self.hidden.contains(&0) || self.samples_per_class == 0 || self.batch_size == 0 {
            return Err(RankError::Config("widths and sample counts must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(RankError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Draws `n` members of `pool`: without replacement when the pool is large
/// enough, otherwise every member repeatedly plus a random remainder.
fn balanced_draw<R: Rng + ?Sized>(pool: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() >= n {
        return pool.choose_multiple(rng, n).copied().collect();
    }
    let mut out = Vec::with_capacity(n);
    while out.len() + pool.len() <= n {
        out.extend_from_slice(pool);
    }
    out.extend(pool.choose_multiple(rng, n - out.len()).copied());
    out
}

fn train_discriminator<R: Rng + ?Sized>(
    rows: &Matrix,
    ranked: &[usize],
    unranked: &[usize],
    cfg: &DiscriminatorConfig,
    mlp: &mut Mlp,
    rng: &mut R,
) {
    let mut opt = Adam::new(&mlp.params);
    let per_class = ranked.len().max(unranked.len()).min(cfg.samples_per_class);
    for _ in 0..cfg.epochs {
        let mut batch: Vec<(usize, f64)> = balanced_draw(ranked, per_class, rng)
            .into_iter()
            .map(|i| (i, 0.0))
            .chain(balanced_draw(unranked, per_class, rng).into_iter().map(|i| (i, 1.0)))
            .collect();
        batch.shuffle(rng);
        for chunk in batch.chunks(cfg.batch_size) {
            let idx: Vec<usize> = chunk.iter().map(|c| c.0).collect();
            let x = rows.select_rows(&idx);
            let y = Matrix::from_vec(chunk.len(), 1, chunk.iter().map(|c| c.1).collect());
            mlp.train_step(&mut opt, cfg.learning_rate, &x, &y, None);
        }
    }
}

/// Full ranking by iterative binary classification.
pub fn rank(table: &FeatureTable, cfg: &DiscriminatorConfig, seed: u64) -> Result<Ranking, RankError> {
    rank_prefix(table, cfg, seed, table.len())
}

/// The first `count` elements of [`rank`] for the same arguments, computed
/// without running the remaining rounds.
pub fn rank_prefix(table: &FeatureTable, cfg: &DiscriminatorConfig, seed: u64, count: usize) -> Result<Ranking, RankError> {
    cfg.validate()?;
    if table.is_empty() {
        return Err(RankError::Empty);
    }
    let n = table.len();
    let count = count.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..n);
    let mut ranked = vec![first];
    let mut scores = vec![None];
    let mut in_ranked = vec![false; n];
    in_ranked[first] = true;
    let widths = [table.dim(), cfg.hidden[0], cfg.hidden[1], 1];
    let mut warm: Option<Mlp> = None;
    let mut round = 0u64;
    while ranked.len() < count {
        let unranked: Vec<usize> = (0..n).filter(|&i| !in_ranked[i]).collect();
        let mut round_rng = ChaCha8Rng::seed_from_u64(seed);
        round_rng.set_stream(round + 1);
        let mut mlp = match warm.take() {
            Some(m) if cfg.warm_start => m,
            _ => Mlp::new(&widths, &mut round_rng),
        };
        train_discriminator(table.rows(), &ranked, &unranked, cfg, &mut mlp, &mut round_rng);
        let probs = mlp.probabilities(&table.rows().select_rows(&unranked));
        let mut cand: Vec<(usize, f64)> = unranked.iter().zip(probs.as_slice()).map(|(&i, &p)| (i, p)).collect();
        // Highest probability first; ties go to the smaller id.
        cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(i, p) in cand.iter().take(cfg.batch_add.min(count - ranked.len())) {
            ranked.push(i);
            scores.push(Some(p));
            in_ranked[i] = true;
        }
        if cfg.warm_start {
            warm = Some(mlp);
        }
        round += 1;
    }
    Ok(Ranking {
        seed,
        order: ranked.into_iter().map(|i| table.ids[i].clone()).collect(),
        scores,
    })
}

/// Exact farthest-point sampling from `start`. Each step selects the
/// unranked point with the largest Euclidean distance to its nearest ranked
/// point; ties go to the lexicographically smaller id. Scores are those
/// distances.
pub fn fps_oracle(table: &FeatureTable, start: &str) -> Result<Ranking, RankError> {
    let n = table.len();
    let first = table.index_of(start).ok_or_else(|| RankError::UnknownId(start.to_owned()))?;
    let rows = table.rows();
    let dist = |a: usize, b: usize| {
        let d: Vec<f64> = rows.row(a).iter().zip(rows.row(b)).map(|(x, y)| x - y).collect();
        l2_norm(&d)
    };
    let mut min_d: Vec<f64> = (0..n).map(|i| dist(i, first)).collect();
    let mut taken = vec![false; n];
    taken[first] = true;
    let mut order = vec![first];
    let mut scores = vec![None];
    while order.len() < n {
        let mut best: Option<usize> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            if best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("an unranked point remains");
        taken[b] = true;
        order.push(b);
        scores.push(Some(min_d[b]));
        for i in 0..n {
            if !taken[i] {
                min_d[i] = min_d[i].min(dist(i, b));
            }
        }
    }
    Ok(Ranking {
        seed: 0,
        order: order.into_iter().map(|i| table.ids[i].clone()).collect(),
        scores,
    })
}

/// Uniformly random order, the baseline the ranking is compared against.
pub fn random_ranking(ids: &[String], seed: u64) -> Ranking {
    let mut order = ids.to_vec();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ranking {
        seed,
        scores: vec![None; order.len()],
        order,
    }
}

/// Size of a labelling budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Budget {
    Count(usize),
    Fraction(f64),
}

impl Budget {
    /// Number of sequences the budget covers out of `n`. Fractions are
    /// rounded up, except that a product within 0.01 above an integer counts
    /// as that integer, so a percentage printed to two decimals resolves to
    /// the count it was computed from.
    pub fn resolve(self, n: usize) -> Result<usize, RankError> {
        let k = match self {
            Budget::Count(k) => k,
            Budget::Fraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(RankError::Budget(f.to_string(), n));
                }
                ((n as f64 * f - 0.01).ceil().max(1.0)) as usize
            }
        };
        if k == 0 || k > n {
            return Err(RankError::Budget(format!("{self:?}"), n));
        }
        Ok(k)
    }
}

/// The first ids of a ranking covered by `budget`.
pub fn prefix(ranking: &Ranking, budget: Budget) -> Result<Vec<String>, RankError> {
    let k = budget.resolve(ranking.len())?;
    Ok(ranking.order[..k].to_vec())
}
