//! Skeleton motion datasets: domain types, the on-disk layout, and pose
//! normalisation.
//!
//! On disk a dataset is a directory holding
//!
//! ```text
//! manifest.json            {"class_names": [..], "joint_names": [..], "fps": 120.0, "parents": [..]?}
//! sequences/<id>.json      {"id": "..", "frames": [[[x, y, z], ...J], ...T]}
//! labels/<id>.json         {"id": "..", "labels": [[0|1, ...m], ...T]}   (optional)
//! ```
//!
//! The vertical axis is `+y`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub type Vec3 = [f64; 3];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing manifest at {0}")]
    MissingManifest(PathBuf),
    #[error("no sequences found under {0}")]
    NoSequences(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: frame {frame}: expected {expected} joints, found {found}")]
    JointCount {
        path: PathBuf,
        frame: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}: frame {frame}, joint {joint}: non-finite coordinate")]
    NonFinite {
        path: PathBuf,
        frame: usize,
        joint: usize,
    },
    #[error("{path}: multi-actor sequences are not supported")]
    MultiActor { path: PathBuf },
    #[error("{0}")]
    Invalid(String),
}

/// Joint positions of a single pose, in world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkeletonFrame {
    pub joints: Vec<Vec3>,
}

impl SkeletonFrame {
    pub fn new(joints: Vec<Vec3>) -> Self {
        Self { joints }
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub id: String,
    pub fps: f64,
    pub frames: Vec<SkeletonFrame>,
}

impl MotionSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_joints(&self) -> usize {
        self.frames.first().map_or(0, SkeletonFrame::num_joints)
    }
}

/// Per-frame multi-label annotation of one sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMatrix {
    #[serde(rename = "id")]
    pub sequence_id: String,
    pub labels: Vec<Vec<u8>>,
}

impl LabelMatrix {
    pub fn zeros(sequence_id: impl Into<String>, frames: usize, classes: usize) -> Self {
        Self {
            sequence_id: sequence_id.into(),
            labels: vec![vec![0; classes]; frames],
        }
    }

    pub fn num_frames(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, frames: usize, classes: usize) -> Result<(), DataError> {
        if self.labels.len() != frames {
            return Err(DataError::Invalid(format!(
                "labels for {}: {} rows, sequence has {frames} frames",
                self.sequence_id,
                self.labels.len()
            )));
        }
        for (t, row) in self.labels.iter().enumerate() {
            if row.len() != classes || row.iter().any(|&v| v > 1) {
                return Err(DataError::Invalid(format!(
                    "labels for {}: row {t} is not a binary vector of width {classes}",
                    self.sequence_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub joint_names: Vec<String>,
    pub fps: f64,
    /// Parent joint index per joint, `-1` for the root. Used for bone lengths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parents: Option<Vec<i64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionDataset {
    pub sequences: Vec<MotionSequence>,
    pub class_names: Vec<String>,
    pub joint_names: Vec<String>,
    pub parents: Option<Vec<i64>>,
    pub fps: f64,
}

impl MotionDataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn get(&self, id: &str) -> Option<&MotionSequence> {
        self.sequences.iter().find(|s| s.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.sequences.iter().map(|s| s.id.clone()).collect()
    }

    /// Bones as `(parent, child)` pairs when the manifest declares a hierarchy.
    pub fn bones(&self) -> Option<Vec<(usize, usize)>> {
        self.parents.as_ref().map(|p| {
            p.iter()
                .enumerate()
                .filter(|(_, &par)| par >= 0)
                .map(|(c, &par)| (par as usize, c))
                .collect()
        })
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            class_names: self.class_names.clone(),
            joint_names: self.joint_names.clone(),
            fps: self.fps,
            parents: self.parents.clone(),
        }
    }

    /// Checks the dataset-wide invariants.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.class_names.is_empty() {
            return Err(DataError::Invalid("dataset declares no classes".into()));
        }
        if self.joint_names.is_empty() {
            return Err(DataError::Invalid("dataset declares no joints".into()));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(DataError::Invalid(format!("invalid fps {}", self.fps)));
        }
        if let Some(p) = &self.parents {
            if p.len() != self.joint_names.len()
                || p.iter().any(|&i| i >= self.joint_names.len() as i64 || i < -1)
            {
                return Err(DataError::Invalid("parents do not describe the joints".into()));
            }
        }
        let mut seen = HashSet::new();
        let j = self.joint_names.len();
        for s in &self.sequences {
            if !seen.insert(s.id.as_str()) {
                return Err(DataError::Invalid(format!("duplicate sequence id {}", s.id)));
            }
            if s.frames.is_empty() {
                return Err(DataError::Invalid(format!("sequence {} has no frames", s.id)));
            }
            let path = PathBuf::from(&s.id);
            for (t, f) in s.frames.iter().enumerate() {
                if f.num_joints() != j {
                    return Err(DataError::JointCount {
                        path,
                        frame: t,
                        expected: j,
                        found: f.num_joints(),
                    });
                }
                if let Some(joint) = f.joints.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
                    return Err(DataError::NonFinite {
                        path,
                        frame: t,
                        joint,
                    });
                }
            }
        }
        Ok(())
    }
}

// --- file formats ---------------------------------------------------------

/// A coordinate as it may appear on disk. Non-numbers are read so that they
/// can be reported with their frame index instead of as a parse error.
#[derive(Deserialize)]
#[serde(untagged)]
enum RawCoord {
    Num(f64),
    Other(serde_json::Value),
}

#[derive(Deserialize)]
struct RawSequence {
    id: String,
    #[serde(default)]
    fps: Option<f64>,
    #[serde(default)]
    frames: Option<Vec<Vec<Vec<RawCoord>>>>,
    #[serde(default)]
    actors: Option<serde_json::Value>,
}

#[derive(Serialize)]
struct SequenceFile<'a> {
    id: &'a str,
    frames: &'a [SkeletonFrame],
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.to_owned(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let text = serde_json::to_string(value).map_err(|source| DataError::Json {
        path: path.to_owned(),
        source,
    })?;
    fs::write(path, text).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })
}

fn parse_sequence(path: &Path, default_fps: f64, joints: usize) -> Result<MotionSequence, DataError> {
    let raw: RawSequence = read_json(path)?;
    if raw.actors.is_some() {
        return Err(DataError::MultiActor { path: path.to_owned() });
    }
    let frames = raw
        .frames
        .ok_or_else(|| DataError::Invalid(format!("{}: missing \"frames\"", path.display())))?;
    let mut out = Vec::with_capacity(frames.len());
    for (t, frame) in frames.into_iter().enumerate() {
        if frame.len() != joints {
            return Err(DataError::JointCount {
                path: path.to_owned(),
                frame: t,
                expected: joints,
                found: frame.len(),
            });
        }
        let mut pose = Vec::with_capacity(joints);
        for (j, coords) in frame.into_iter().enumerate() {
            if coords.iter().any(|c| matches!(c, RawCoord::Other(serde_json::Value::Array(_)))) {
                return Err(DataError::MultiActor { path: path.to_owned() });
            }
            if coords.len() != 3 {
                return Err(DataError::Invalid(format!(
                    "{}: frame {t}, joint {j}: expected 3 coordinates, found {}",
                    path.display(),
                    coords.len()
                )));
            }
            let mut p = [0.0; 3];
            for (slot, c) in p.iter_mut().zip(coords) {
                match c {
                    RawCoord::Num(v) if v.is_finite() => *slot = v,
                    _ => {
                        return Err(DataError::NonFinite {
                            path: path.to_owned(),
                            frame: t,
                            joint: j,
                        })
                    }
                }
            }
            pose.push(p);
        }
        out.push(SkeletonFrame::new(pose));
    }
    if out.is_empty() {
        return Err(DataError::Invalid(format!("{}: sequence has no frames", path.display())));
    }
    Ok(MotionSequence {
        id: raw.id,
        fps: raw.fps.unwrap_or(default_fps),
        frames: out,
    })
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let entries = fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.to_owned(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads and validates a dataset directory.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<MotionDataset, DataError> {
    let root = root.as_ref();
    let manifest_path = root.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(DataError::MissingManifest(manifest_path));
    }
    let manifest: Manifest = read_json(&manifest_path)?;
    let seq_dir = root.join("sequences");
    let files = if seq_dir.is_dir() { json_files(&seq_dir)? } else { Vec::new() };
    if files.is_empty() {
        return Err(DataError::NoSequences(root.to_owned()));
    }
    let joints = manifest.joint_names.len();
    let sequences = files
        .par_iter()
        .map(|p| parse_sequence(p, manifest.fps, joints))
        .collect::<Result<Vec<_>, _>>()?;
    let ds = MotionDataset {
        sequences,
        class_names: manifest.class_names,
        joint_names: manifest.joint_names,
        parents: manifest.parents,
        fps: manifest.fps,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes the manifest and one file per sequence.
pub fn save_dataset(ds: &MotionDataset, root: impl AsRef<Path>) -> Result<(), DataError> {
    let root = root.as_ref();
    let seq_dir = root.join("sequences");
    fs::create_dir_all(&seq_dir).map_err(|source| DataError::Io {
        path: seq_dir.clone(),
        source,
    })?;
    write_json(&root.join("manifest.json"), &ds.manifest())?;
    for s in &ds.sequences {
        write_json(
            &seq_dir.join(format!("{}.json", s.id)),
            &SequenceFile {
                id: &s.id,
                frames: &s.frames,
            },
        )?;
    }
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMatrix, DataError> {
    read_json(path.as_ref())
}

pub fn write_labels(labels: &LabelMatrix, path: impl AsRef<Path>) -> Result<(), DataError> {
    write_json(path.as_ref(), labels)
}

/// Reads every `<dir>/<id>.json` label file, keyed by sequence id.
pub fn load_labels_dir(dir: impl AsRef<Path>) -> Result<BTreeMap<String, LabelMatrix>, DataError> {
    let dir = dir.as_ref();
    let mut out = BTreeMap::new();
    for p in json_files(dir)? {
        let l = read_labels(&p)?;
        out.insert(l.sequence_id.clone(), l);
    }
    Ok(out)
}

pub fn save_labels_dir<'a>(
    labels: impl IntoIterator<Item = &'a LabelMatrix>,
    dir: impl AsRef<Path>,
) -> Result<(), DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_owned(),
        source,
    })?;
    for l in labels {
        write_labels(l, dir.join(format!("{}.json", l.sequence_id)))?;
    }
    Ok(())
}

// --- normalisation --------------------------------------------------------

/// Which joints anchor position, heading and scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizeConfig {
    pub root_joint: usize,
    /// The horizontal vector from `facing_joints.0` to `facing_joints.1` is
    /// rotated onto `+x` at the first frame.
    pub facing_joints: (usize, usize),
    /// Bones used for the size estimate. When absent, the mean distance of
    /// every joint to the root stands in for the mean bone length.
    #[serde(default)]
    pub bones: Option<Vec<(usize, usize)>>,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self {
            root_joint: 0,
            facing_joints: (0, 1),
            bones: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NormalizeWarning {
    /// The facing joints coincide horizontally; no yaw correction applied.
    DegenerateFacing,
    /// The size estimate is zero; no scaling applied.
    DegenerateScale,
}

/// Canonicalises position, heading and size of a sequence.
///
/// Every frame has its root moved to the origin of the horizontal plane and
/// the frame-1 floor (lowest joint) moved to `y = 0`; the whole sequence is
/// rotated about `+y` so the frame-1 facing vector points along `+x`, then
/// divided by the frame-1 mean bone length.
pub fn normalize_sequence(
    seq: &MotionSequence,
    cfg: &NormalizeConfig,
) -> Result<(MotionSequence, Vec<NormalizeWarning>), DataError> {
    let j = seq.num_joints();
    let check = |i: usize, what: &str| {
        if i >= j {
            Err(DataError::Invalid(format!("{what} index {i} out of range for {j} joints")))
        } else {
            Ok(())
        }
    };
    check(cfg.root_joint, "root joint")?;
    check(cfg.facing_joints.0, "facing joint")?;
    check(cfg.facing_joints.1, "facing joint")?;
    if let Some(b) = &cfg.bones {
        for &(a, c) in b {
            check(a, "bone")?;
            check(c, "bone")?;
        }
    }
    if seq.frames.is_empty() {
        return Err(DataError::Invalid(format!("sequence {} has no frames", seq.id)));
    }
    let mut warnings = Vec::new();
    let first = &seq.frames[0];

    let (fa, fb) = (first.joints[cfg.facing_joints.0], first.joints[cfg.facing_joints.1]);
    let (vx, vz) = (fb[0] - fa[0], fb[2] - fa[2]);
    let (cos, sin) = if (vx * vx + vz * vz).sqrt() < 1e-12 {
        warnings.push(NormalizeWarning::DegenerateFacing);
        (1.0, 0.0)
    } else {
        let th = vz.atan2(vx);
        (th.cos(), th.sin())
    };

    let size = match &cfg.bones {
        Some(bones) if !bones.is_empty() => {
            bones.iter().map(|&(a, b)| dist(first.joints[a], first.joints[b])).sum::<f64>() / bones.len() as f64
        }
        _ => {
            let r = first.joints[cfg.root_joint];
            let others = first.joints.len().saturating_sub(1).max(1);
            first.joints.iter().map(|&p| dist(p, r)).sum::<f64>() / others as f64
        }
    };
    let inv_scale = if size > 1e-12 {
        1.0 / size
    } else {
        warnings.push(NormalizeWarning::DegenerateScale);
        1.0
    };
    let floor = first.joints.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);

    let frames = seq
        .frames
        .iter()
        .map(|f| {
            let root = f.joints[cfg.root_joint];
            let joints = f
                .joints
                .iter()
                .map(|p| {
                    let (x, y, z) = (p[0] - root[0], p[1] - floor, p[2] - root[2]);
                    // rotate by -theta about +y
                    let xr = x * cos + z * sin;
                    let zr = -x * sin + z * cos;
                    [xr * inv_scale, y * inv_scale, zr * inv_scale]
                })
                .collect();
            SkeletonFrame::new(joints)
        })
        .collect();
    Ok((
        MotionSequence {
            id: seq.id.clone(),
            fps: seq.fps,
            frames,
        },
        warnings,
    ))
}

fn dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Normalises every sequence of a dataset, logging any warnings.
pub fn normalize_dataset(ds: &MotionDataset, cfg: &NormalizeConfig) -> Result<MotionDataset, DataError> {
    let sequences = ds
        .sequences
        .iter()
        .map(|s| {
            let (n, w) = normalize_sequence(s, cfg)?;
            for warning in w {
                log::warn!("sequence {}: {:?}", s.id, warning);
            }
            Ok(n)
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(MotionDataset {
        sequences,
        ..ds.clone()
    })
}
