//! End-to-end runs on a normalised dataset: embedding, labelling-budget
//! sweeps, robustness over initial elements and the augmentation ablation.

use crate::annotate::{evaluate, train_annotator, AnnotateError, AnnotatorConfig, EvalReport};
use crate::augment::{AugmentError, AugmentToggles, AugmentationConfig};
use crate::data::{LabelMatrix, MotionDataset, NormalizeConfig};
use crate::encoder::{Encoder, EncoderError, FeatureVector};
use crate::pretrain::{pretrain, PretrainConfig, PretrainError};
use crate::probe::{linear_probe, ProbeConfig, ProbeResult};
use crate::rank::{fps_oracle, random_ranking, rank_prefix, raw_features, Budget, DiscriminatorConfig, FeatureTable, RankError, Ranking};
use crate::tensor::Matrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error("{0}")]
    Invalid(String),
}

/// Every tunable of the pipeline except file locations.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub normalize: NormalizeConfig,
    pub pretrain: PretrainConfig,
    pub discriminator: DiscriminatorConfig,
    pub annotator: AnnotatorConfig,
    pub probe: ProbeConfig,
    /// Frames per encoder pass at inference; 0 means the view length `n_ds`.
    pub embed_window: usize,
}

impl ExperimentConfig {
    pub fn window(&self) -> usize {
        if self.embed_window == 0 {
            self.pretrain.augmentation.n_ds
        } else {
            self.embed_window
        }
    }
}

/// Settings sized for the synthetic benchmark on one CPU core: a small
/// encoder, 32-frame views at 120 fps, a 300-entry queue and the normalised
/// frame-level term.
pub fn benchmark_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        normalize: crate::synth::normalize_config(),
        ..ExperimentConfig::default()
    };
    let p = &mut cfg.pretrain;
    p.encoder.embed_dim = 32;
    p.encoder.feature_dim = 32;
    p.encoder.spatial_layers = 1;
    p.encoder.temporal_layers = 1;
    p.encoder.max_frames = 32;
    p.augmentation.n_ds = 32;
    p.schedule.epochs = BENCHMARK_EPOCHS;
    p.schedule.queue_capacity = 300;
    p.loss.normalized_frame_loss = true;
    cfg
}

/// Pretraining epochs of [`benchmark_config`].
pub const BENCHMARK_EPOCHS: usize = 20;

/// Frozen features of a whole dataset.
#[derive(Clone, Debug, Default)]
pub struct Embeddings {
    pub frames: BTreeMap<String, Vec<FeatureVector>>,
    pub sequences: BTreeMap<String, FeatureVector>,
}

impl Embeddings {
    pub fn sequence_table(&self) -> Result<FeatureTable, RankError> {
        FeatureTable::from_features(&self.sequences)
    }

    pub fn ids(&self) -> Vec<String> {
        self.sequences.keys().cloned().collect()
    }
}

pub fn embed_dataset(encoder: &Encoder, ds: &MotionDataset, aug: &AugmentationConfig, window: usize) -> Result<Embeddings, ExperimentError> {
    let parts: Vec<_> = ds
        .sequences
        .par_iter()
        .map(|s| -> Result<_, ExperimentError> {
            let x = aug.enhance(s)?;
            let e = encoder.embed_sequence(&x, window)?;
            Ok((s.id.clone(), e))
        })
        .collect::<Result<_, _>>()?;
    let mut out = Embeddings::default();
    for (id, e) in parts {
        out.frames.insert(id.clone(), e.frames);
        out.sequences.insert(id, e.sequence);
    }
    Ok(out)
}

/// Trains the annotator on `prefix` and scores its predictions on every
/// other sequence of `truth`.
pub fn evaluate_prefix(
    emb: &Embeddings,
    truth: &BTreeMap<String, LabelMatrix>,
    prefix: &[String],
    cfg: &AnnotatorConfig,
) -> Result<EvalReport, ExperimentError> {
    let mut train = BTreeMap::new();
    for id in prefix {
        let l = truth
            .get(id)
            .ok_or_else(|| ExperimentError::Invalid(format!("no ground truth for {id}")))?;
        train.insert(id.clone(), l.clone());
    }
    let ann = train_annotator(&emb.frames, &train, cfg)?;
    let mut pred = BTreeMap::new();
    let mut rest = BTreeMap::new();
    for (id, l) in truth {
        if train.contains_key(id) {
            continue;
        }
        let f = emb
            .frames
            .get(id)
            .ok_or_else(|| ExperimentError::Invalid(format!("no features for {id}")))?;
        pred.insert(id.clone(), ann.predict(id, f, cfg.threshold)?);
        rest.insert(id.clone(), l.clone());
    }
    Ok(evaluate(&pred, &rest)?)
}

/// How a labelling order is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Discriminator ranking on learned sequence features.
    Ranked,
    /// Discriminator ranking on resampled raw coordinates.
    RankedRaw,
    /// Farthest-point oracle on learned features from a seeded start.
    Farthest,
    Random,
}

/// Inputs shared by all sweep runs.
pub struct SweepInputs<'a> {
    pub embeddings: &'a Embeddings,
    pub truth: &'a BTreeMap<String, LabelMatrix>,
    /// Normalised dataset, needed for raw-coordinate ranking.
    pub dataset: Option<&'a MotionDataset>,
    pub discriminator: &'a DiscriminatorConfig,
    pub annotator: &'a AnnotatorConfig,
}

/// Frames kept per sequence when ranking on raw coordinates.
pub const RAW_FRAMES: usize = 16;

/// The first `count` ids under `selection` for one seed.
pub fn selection_prefix(inputs: &SweepInputs, selection: Selection, seed: u64, count: usize) -> Result<Ranking, ExperimentError> {
    match selection {
        Selection::Ranked => Ok(rank_prefix(&inputs.embeddings.sequence_table()?, inputs.discriminator, seed, count)?),
        Selection::RankedRaw => {
            let ds = inputs
                .dataset
                .ok_or_else(|| ExperimentError::Invalid("raw ranking needs the dataset".into()))?;
            Ok(rank_prefix(&raw_features(ds, RAW_FRAMES)?, inputs.discriminator, seed, count)?)
        }
        Selection::Farthest => {
            let table = inputs.embeddings.sequence_table()?;
            let start = random_ranking(table.ids(), seed).order[0].clone();
            let mut r = fps_oracle(&table, &start)?;
            r.order.truncate(count);
            r.scores.truncate(count);
            r.seed = seed;
            Ok(r)
        }
        Selection::Random => {
            let mut r = random_ranking(&inputs.embeddings.ids(), seed);
            r.order.truncate(count);
            r.scores.truncate(count);
            Ok(r)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub selection: Selection,
    pub budget: f64,
    pub labelled: usize,
    pub seed: u64,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

/// Micro/macro-F1 for every (seed, budget) pair. Each seed computes one
/// ordering up to the largest budget; smaller budgets reuse its prefix.
/// Seeds run in parallel.
pub fn budget_sweep(inputs: &SweepInputs, selection: Selection, budgets: &[Budget], seeds: &[u64]) -> Result<Vec<SweepRow>, ExperimentError> {
    let n = inputs.embeddings.sequences.len();
    let counts: Vec<usize> = budgets.iter().map(|b| b.resolve(n)).collect::<Result<_, _>>()?;
    let max = counts.iter().copied().max().unwrap_or(0);
    let per_seed: Vec<Vec<SweepRow>> = seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<SweepRow>, ExperimentError> {
            let order = selection_prefix(inputs, selection, seed, max)?;
            budgets
                .iter()
                .zip(&counts)
                .map(|(b, &k)| {
                    let report = evaluate_prefix(inputs.embeddings, inputs.truth, &order.order[..k], inputs.annotator)?;
                    Ok(SweepRow {
                        selection,
                        budget: match *b {
                            Budget::Fraction(f) => f,
                            Budget::Count(c) => c as f64 / n as f64,
                        },
                        labelled: k,
                        seed,
                        micro_f1: report.micro_f1,
                        macro_f1: report.macro_f1,
                    })
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSummary {
    pub budget: f64,
    pub runs: usize,
    pub mean_micro_f1: f64,
    /// Sample standard deviation over seeds.
    pub std_micro_f1: f64,
    pub mean_macro_f1: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Groups rows by budget, in first-appearance order.
pub fn summarize(rows: &[SweepRow]) -> Vec<BudgetSummary> {
    let mut budgets: Vec<f64> = Vec::new();
    for r in rows {
        if !budgets.contains(&r.budget) {
            budgets.push(r.budget);
        }
    }
    budgets
        .into_iter()
        .map(|b| {
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.budget == b).collect();
            let micro: Vec<f64> = sel.iter().map(|r| r.micro_f1).collect();
            let macro_: Vec<f64> = sel.iter().map(|r| r.macro_f1).collect();
            let (mean, std) = mean_std(&micro);
            BudgetSummary {
                budget: b,
                runs: sel.len(),
                mean_micro_f1: mean,
                std_micro_f1: std,
                mean_macro_f1: mean_std(&macro_).0,
            }
        })
        .collect()
}

/// CSV with one line per budget: `budget,runs,mean_micro_f1,std_micro_f1,mean_macro_f1`.
pub fn summary_csv(rows: &[BudgetSummary]) -> String {
    let mut s = String::from("budget,runs,mean_micro_f1,std_micro_f1,mean_macro_f1\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.budget, r.runs, r.mean_micro_f1, r.std_micro_f1, r.mean_macro_f1));
    }
    s
}

/// The plain momentum-contrast setup: no perturbation, no trajectories, no
/// random downsampling, no reversed negative and no frame-level term.
pub fn baseline(cfg: &PretrainConfig) -> PretrainConfig {
    let mut c = cfg.clone();
    c.augmentation.toggles = AugmentToggles {
        perturbation: false,
        dilation: false,
        downsampling: false,
        reverse: false,
    };
    c.loss.omega = 0.0;
    c
}

/// Cumulative ablation rows: the baseline, then perturbation, dilated
/// trajectories, downsampling, the reversed negative and finally the
/// frame-level term switched on one after another. The frame-level row
/// restores the configured `omega`, or 1 when it is 0.
pub fn ablation_grid(cfg: &PretrainConfig) -> Vec<(String, PretrainConfig)> {
    let mut rows = Vec::new();
    let mut c = baseline(cfg);
    rows.push(("baseline".to_owned(), c.clone()));
    c.augmentation.toggles.perturbation = true;
    rows.push(("+perturbation".to_owned(), c.clone()));
    c.augmentation.toggles.dilation = true;
    rows.push(("+dilated".to_owned(), c.clone()));
    c.augmentation.toggles.downsampling = true;
    rows.push(("+downsampling".to_owned(), c.clone()));
    c.augmentation.toggles.reverse = true;
    rows.push(("+reverse".to_owned(), c.clone()));
    c.loss.omega = if cfg.loss.omega > 0.0 { cfg.loss.omega } else { 1.0 };
    rows.push(("+local_consistency".to_owned(), c));
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seed: u64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub probe_accuracy: f64,
}

/// Sequence features as rows with their class indices.
pub fn probe_inputs(emb: &Embeddings, classes: &BTreeMap<String, usize>) -> Result<(Matrix, Vec<usize>), ExperimentError> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (id, f) in &emb.sequences {
        let c = classes
            .get(id)
            .ok_or_else(|| ExperimentError::Invalid(format!("no class for {id}")))?;
        rows.push(f.as_slice().to_vec());
        labels.push(*c);
    }
    Ok((Matrix::from_rows(&rows), labels))
}

/// Pretrains under `pretrain_cfg` and probes the result.
pub fn probe_pretraining(
    ds: &MotionDataset,
    classes: &BTreeMap<String, usize>,
    pretrain_cfg: &PretrainConfig,
    window: usize,
    probe: &ProbeConfig,
) -> Result<(Embeddings, ProbeResult), ExperimentError> {
    let out = pretrain(ds, pretrain_cfg)?;
    let emb = embed_dataset(&out.encoder(), ds, &pretrain_cfg.augmentation, window)?;
    let (x, y) = probe_inputs(&emb, classes)?;
    Ok((emb, linear_probe(&x, &y, probe)))
}

/// Runs every ablation row for every seed. Each row pretrains from scratch,
/// probes the sequence features and scores the annotator trained on the
/// ranked prefix of size `budget`.
pub fn run_ablation(
    ds: &MotionDataset,
    truth: &BTreeMap<String, LabelMatrix>,
    classes: &BTreeMap<String, usize>,
    cfg: &ExperimentConfig,
    seeds: &[u64],
    budget: Budget,
) -> Result<Vec<AblationRow>, ExperimentError> {
    let mut rows = Vec::new();
    for (name, pcfg) in ablation_grid(&cfg.pretrain) {
        for &seed in seeds {
            let mut p = pcfg.clone();
            p.schedule.seed = seed;
            p.augmentation.seed = seed;
            let (emb, probe) = probe_pretraining(ds, classes, &p, cfg.window(), &cfg.probe)?;
            let inputs = SweepInputs {
                embeddings: &emb,
                truth,
                dataset: None,
                discriminator: &cfg.discriminator,
                annotator: &cfg.annotator,
            };
            let sweep = budget_sweep(&inputs, Selection::Ranked, &[budget], &[seed])?;
            rows.push(AblationRow {
                name: name.clone(),
                seed,
                micro_f1: sweep[0].micro_f1,
                macro_f1: sweep[0].macro_f1,
                probe_accuracy: probe.test_accuracy,
            });
        }
    }
    Ok(rows)
}

/// Mean of each ablation row over seeds, in grid order.
pub fn ablation_table(rows: &[AblationRow]) -> Vec<AblationRow> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.name.as_str()) {
            names.push(&r.name);
        }
    }
    names
        .into_iter()
        .map(|n| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.name == n).collect();
            let mean = |f: fn(&AblationRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / sel.len() as f64;
            AblationRow {
                name: n.to_owned(),
                seed: sel.len() as u64,
                micro_f1: mean(|r| r.micro_f1),
                macro_f1: mean(|r| r.macro_f1),
                probe_accuracy: mean(|r| r.probe_accuracy),
            }
        })
        .collect()
}
