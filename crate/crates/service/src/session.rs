//! Annotation session state, independent of the HTTP layer.

use crate::ServiceError;
use mocurate::annotate::{evaluate, train_annotator, Annotator, AnnotatorConfig, EvalReport};
use mocurate::data::{read_labels, write_labels, LabelMatrix, MotionDataset, SkeletonFrame};
use mocurate::encoder::FeatureVector;
use mocurate::rank::Ranking;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

/// Reloadable part of the session.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    /// Annotation classes; the dataset's own list when absent.
    pub class_names: Option<Vec<String>>,
    pub annotator: AnnotatorConfig,
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub id: String,
    /// 1-based position in the full ranking.
    pub position: usize,
    pub score: Option<f64>,
}

/// One labelled span, frames 1-based and inclusive. Accepts either
/// `[start, end, "class"]` or an object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Interval {
    Tuple(usize, usize, String),
    Object { start_frame: usize, end_frame: usize, class: String },
}

impl Interval {
    pub fn parts(&self) -> (usize, usize, &str) {
        match self {
            Interval::Tuple(s, e, c) => (*s, *e, c),
            Interval::Object { start_frame, end_frame, class } => (*start_frame, *end_frame, class),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub id: String,
    pub intervals: Vec<Interval>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SequenceView<'a> {
    pub id: &'a str,
    pub fps: f64,
    pub joint_names: &'a [String],
    pub class_names: &'a [String],
    pub frames: &'a [SkeletonFrame],
    pub position: Option<usize>,
    pub labels: Option<&'a LabelMatrix>,
    pub predictions: Option<&'a LabelMatrix>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: u64,
    pub state: JobState,
    /// Seconds since the job started, final once it completes.
    pub duration: f64,
    pub labelled_sequences: usize,
    pub labelled_frames: usize,
    pub eval_on_labeled: Option<EvalReport>,
    pub error: Option<String>,
    /// Unix seconds at job start.
    pub started_at: f64,
}

/// Everything a retrain worker needs, detached from the live session.
pub struct RetrainJob {
    pub job_id: u64,
    generation: u64,
    labels: BTreeMap<String, LabelMatrix>,
    features: Arc<BTreeMap<String, Vec<FeatureVector>>>,
    config: AnnotatorConfig,
    started: Instant,
}

pub struct RetrainOutcome {
    job_id: u64,
    generation: u64,
    duration: f64,
    result: Result<(Annotator, EvalReport, BTreeMap<String, LabelMatrix>), String>,
}

impl RetrainJob {
    /// Trains on the snapshot, scores the labelled set and predicts every
    /// sequence outside it.
    pub fn run(self) -> RetrainOutcome {
        let result = (|| {
            let ann = train_annotator(&self.features, &self.labels, &self.config).map_err(|e| e.to_string())?;
            let thr = self.config.threshold;
            let mut fitted = BTreeMap::new();
            let mut predictions = BTreeMap::new();
            for (id, frames) in self.features.iter() {
                let p = ann.predict(id, frames, thr).map_err(|e| e.to_string())?;
                if self.labels.contains_key(id) {
                    fitted.insert(id.clone(), p);
                } else {
                    predictions.insert(id.clone(), p);
                }
            }
            let report = evaluate(&fitted, &self.labels).map_err(|e| e.to_string())?;
            Ok((ann, report, predictions))
        })();
        RetrainOutcome {
            job_id: self.job_id,
            generation: self.generation,
            duration: self.started.elapsed().as_secs_f64(),
            result,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReloadSummary {
    pub class_names: Vec<String>,
    pub classes_changed: bool,
    /// Whether the trained annotator and its predictions were dropped.
    pub annotator_invalidated: bool,
}

/// Single-dataset annotation session.
pub struct Session {
    dataset: MotionDataset,
    features: Arc<BTreeMap<String, Vec<FeatureVector>>>,
    ranking: Ranking,
    positions: BTreeMap<String, usize>,
    config: ServiceConfig,
    class_names: Vec<String>,
    config_path: Option<PathBuf>,
    session_dir: Option<PathBuf>,
    labels: BTreeMap<String, LabelMatrix>,
    annotator: Option<Arc<Annotator>>,
    predictions: BTreeMap<String, LabelMatrix>,
    /// Bumped whenever the class set changes; stale retrains are discarded.
    generation: u64,
    jobs: BTreeMap<u64, JobStatus>,
    running: Option<u64>,
    next_job: u64,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

impl Session {
    /// `features` must hold one frame feature per frame for every sequence,
    /// and `ranking` must order exactly the dataset's ids.
    pub fn new(
        dataset: MotionDataset,
        features: BTreeMap<String, Vec<FeatureVector>>,
        ranking: Ranking,
        config: ServiceConfig,
    ) -> Result<Self, ServiceError> {
        let ids = dataset.ids();
        if !ranking.is_permutation_of(&ids) {
            return Err(ServiceError::Config("ranking does not order the dataset's ids".into()));
        }
        for s in &dataset.sequences {
            match features.get(&s.id) {
                Some(f) if f.len() == s.len() => {}
                Some(f) => {
                    return Err(ServiceError::Config(format!("{}: {} feature frames, {} motion frames", s.id, f.len(), s.len())))
                }
                None => return Err(ServiceError::Config(format!("no features for {}", s.id))),
            }
        }
        config.annotator.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        let class_names = config.class_names.clone().unwrap_or_else(|| dataset.class_names.clone());
        check_classes(&class_names)?;
        Ok(Self {
            positions: ranking.positions(),
            dataset,
            features: Arc::new(features),
            ranking,
            config,
            class_names,
            config_path: None,
            session_dir: None,
            labels: BTreeMap::new(),
            annotator: None,
            predictions: BTreeMap::new(),
            generation: 0,
            jobs: BTreeMap::new(),
            running: None,
            next_job: 1,
        })
    }

    /// File re-read by [`Session::reload`].
    pub fn with_config_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.config_path = Some(path.into());
        self
    }

    /// Persists labels under `dir/labels` and restores any already there.
    pub fn with_session_dir(mut self, dir: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let dir = dir.into();
        let labels_dir = dir.join("labels");
        std::fs::create_dir_all(&labels_dir).map_err(|e| ServiceError::Internal(format!("{}: {e}", labels_dir.display())))?;
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&labels_dir)
            .map_err(|e| ServiceError::Internal(e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        entries.sort();
        for p in entries {
            let l = read_labels(&p).map_err(|e| ServiceError::Config(e.to_string()))?;
            let frames = self
                .dataset
                .get(&l.sequence_id)
                .ok_or_else(|| ServiceError::Config(format!("{}: unknown sequence {}", p.display(), l.sequence_id)))?
                .len();
            l.validate(frames, self.class_names.len()).map_err(|e| ServiceError::Config(e.to_string()))?;
            self.labels.insert(l.sequence_id.clone(), l);
        }
        self.session_dir = Some(dir);
        Ok(self)
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn labels(&self) -> &BTreeMap<String, LabelMatrix> {
        &self.labels
    }

    pub fn predictions(&self) -> &BTreeMap<String, LabelMatrix> {
        &self.predictions
    }

    pub fn has_annotator(&self) -> bool {
        self.annotator.is_some()
    }

    pub fn ranking(&self) -> &Ranking {
        &self.ranking
    }

    /// Frozen frame features; no reload or retrain replaces them.
    pub fn features(&self) -> &BTreeMap<String, Vec<FeatureVector>> {
        &self.features
    }

    /// Unlabelled ids in ranking order.
    pub fn queue(&self) -> Vec<QueueItem> {
        self.ranking
            .order
            .iter()
            .zip(&self.ranking.scores)
            .enumerate()
            .filter(|(_, (id, _))| !self.labels.contains_key(*id))
            .map(|(i, (id, score))| QueueItem {
                id: id.clone(),
                position: i + 1,
                score: *score,
            })
            .collect()
    }

    pub fn sequence(&self, id: &str) -> Result<SequenceView<'_>, ServiceError> {
        let s = self.dataset.get(id).ok_or_else(|| ServiceError::NotFound(format!("sequence {id}")))?;
        Ok(SequenceView {
            id: &s.id,
            fps: s.fps,
            joint_names: &self.dataset.joint_names,
            class_names: &self.class_names,
            frames: &s.frames,
            position: self.positions.get(id).copied(),
            labels: self.labels.get(id),
            predictions: self.predictions.get(id),
        })
    }

    /// Expands intervals into a per-frame matrix and replaces the stored
    /// labels of the sequence. Overlapping intervals set every class they
    /// name.
    pub fn submit_labels(&mut self, req: &LabelRequest) -> Result<LabelMatrix, ServiceError> {
        let s = self
            .dataset
            .get(&req.id)
            .ok_or_else(|| ServiceError::NotFound(format!("sequence {}", req.id)))?;
        let t = s.len();
        let mut m = LabelMatrix::zeros(req.id.clone(), t, self.class_names.len());
        for iv in &req.intervals {
            let (start, end, class) = iv.parts();
            if end < start {
                return Err(ServiceError::BadRequest(format!("interval end {end} before start {start}")));
            }
            if start < 1 || end > t {
                return Err(ServiceError::BadRequest(format!("interval {start}..{end} outside frames 1..{t}")));
            }
            let c = self
                .class_names
                .iter()
                .position(|n| n == class)
                .ok_or_else(|| ServiceError::BadRequest(format!("unknown class {class:?}")))?;
            for row in &mut m.labels[start - 1..end] {
                row[c] = 1;
            }
        }
        if let Some(dir) = &self.session_dir {
            let path = dir.join("labels").join(format!("{}.json", req.id));
            write_labels(&m, &path).map_err(|e| ServiceError::Internal(e.to_string()))?;
        }
        self.labels.insert(req.id.clone(), m.clone());
        Ok(m)
    }

    /// Snapshots the label store for a new retrain job.
    pub fn begin_retrain(&mut self) -> Result<RetrainJob, ServiceError> {
        if let Some(j) = self.running {
            return Err(ServiceError::Conflict(format!("retrain {j} still running")));
        }
        if self.labels.is_empty() {
            return Err(ServiceError::BadRequest("no labelled sequences".into()));
        }
        let job_id = self.next_job;
        self.next_job += 1;
        self.running = Some(job_id);
        let labels = self.labels.clone();
        self.jobs.insert(
            job_id,
            JobStatus {
                job_id,
                state: JobState::Running,
                duration: 0.0,
                labelled_sequences: labels.len(),
                labelled_frames: labels.values().map(LabelMatrix::num_frames).sum(),
                eval_on_labeled: None,
                error: None,
                started_at: unix_now(),
            },
        );
        Ok(RetrainJob {
            job_id,
            generation: self.generation,
            labels,
            features: Arc::clone(&self.features),
            config: self.config.annotator.clone(),
            started: Instant::now(),
        })
    }

    /// Installs a finished job. Results computed under an older class set
    /// are recorded as failed and not served.
    pub fn finish_retrain(&mut self, outcome: RetrainOutcome) {
        if self.running == Some(outcome.job_id) {
            self.running = None;
        }
        let stale = outcome.generation != self.generation;
        let Some(status) = self.jobs.get_mut(&outcome.job_id) else {
            return;
        };
        status.duration = outcome.duration;
        match outcome.result {
            Ok(_) if stale => {
                status.state = JobState::Failed;
                status.error = Some("class set changed while retraining".into());
            }
            Ok((ann, report, predictions)) => {
                status.state = JobState::Done;
                status.eval_on_labeled = Some(report);
                self.annotator = Some(Arc::new(ann));
                self.predictions = predictions;
                log::info!("retrain {} done in {:.2}s", outcome.job_id, outcome.duration);
            }
            Err(e) => {
                status.state = JobState::Failed;
                status.error = Some(e);
            }
        }
    }

    pub fn status(&self, job_id: u64) -> Result<JobStatus, ServiceError> {
        let mut s = self
            .jobs
            .get(&job_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("job {job_id}")))?;
        if s.state == JobState::Running {
            s.duration = (unix_now() - s.started_at).max(0.0);
        }
        Ok(s)
    }

    /// Every job so far, oldest first.
    pub fn history(&self) -> Vec<JobStatus> {
        self.jobs.values().cloned().collect()
    }

    /// Re-reads the config file, or applies `config` when given. A changed
    /// class list keeps the encoder features and the ranking, remaps stored
    /// labels by class name and drops the annotator with its predictions.
    pub fn reload(&mut self, config: Option<ServiceConfig>) -> Result<ReloadSummary, ServiceError> {
        let config = match (config, &self.config_path) {
            (Some(c), _) => c,
            (None, Some(p)) => ServiceConfig::load(p)?,
            (None, None) => return Err(ServiceError::BadRequest("no config given and no config file to reload".into())),
        };
        config.annotator.validate().map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let classes = config.class_names.clone().unwrap_or_else(|| self.dataset.class_names.clone());
        check_classes(&classes).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let changed = classes != self.class_names;
        if changed {
            let map: Vec<Option<usize>> = classes.iter().map(|c| self.class_names.iter().position(|o| o == c)).collect();
            for l in self.labels.values_mut() {
                for row in &mut l.labels {
                    *row = map.iter().map(|o| o.map_or(0, |i| row[i])).collect();
                }
            }
            if let Some(dir) = &self.session_dir {
                for l in self.labels.values() {
                    let path = dir.join("labels").join(format!("{}.json", l.sequence_id));
                    write_labels(l, &path).map_err(|e| ServiceError::Internal(e.to_string()))?;
                }
            }
            self.class_names = classes.clone();
            self.annotator = None;
            self.predictions.clear();
            self.generation += 1;
        }
        self.config = config;
        Ok(ReloadSummary {
            class_names: classes,
            classes_changed: changed,
            annotator_invalidated: changed,
        })
    }

    /// Deterministic tar of the manifest, labels and predictions.
    pub fn export(&self) -> Result<Vec<u8>, ServiceError> {
        crate::export::archive(&self.class_names, &self.labels, &self.predictions)
    }
}

fn check_classes(classes: &[String]) -> Result<(), ServiceError> {
    if classes.is_empty() {
        return Err(ServiceError::Config("class list is empty".into()));
    }
    let unique: BTreeSet<&String> = classes.iter().collect();
    if unique.len() != classes.len() {
        return Err(ServiceError::Config("class names must be unique".into()));
    }
    Ok(())
}
