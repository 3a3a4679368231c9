//! The single JSON pipeline document and `--set` overrides.

use crate::CliError;
use mocurate::annotate::AnnotatorConfig;
use mocurate::data::{MotionDataset, NormalizeConfig};
use mocurate::experiments::ExperimentConfig;
use mocurate::pretrain::PretrainConfig;
use mocurate::probe::ProbeConfig;
use mocurate::rank::{Budget, DiscriminatorConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Dataset directory with `manifest.json` and `sequences/`.
    pub dataset: Option<PathBuf>,
    /// Ground-truth or human label directory, one `<id>.json` per sequence.
    pub labels: Option<PathBuf>,
    /// JSON map from sequence id to class index, used by the linear probe.
    pub classes: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Ranking seed: picks the initial element.
    pub seed: u64,
    /// Seeds of the robustness and ablation repetitions.
    pub seeds: Vec<u64>,
    pub budget: Budget,
    pub budgets: Vec<Budget>,
    /// Anchors for canonicalisation; the dataset's root, first two joints
    /// and parent bones when absent.
    pub normalize: Option<NormalizeConfig>,
    pub pretrain: PretrainConfig,
    pub discriminator: DiscriminatorConfig,
    pub annotator: AnnotatorConfig,
    pub probe: ProbeConfig,
    pub embed_window: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            labels: None,
            classes: None,
            out: None,
            seed: 0,
            seeds: (0..10).collect(),
            budget: Budget::Fraction(0.2),
            budgets: [0.01, 0.05, 0.1, 0.2].map(Budget::Fraction).to_vec(),
            normalize: None,
            pretrain: PretrainConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            annotator: AnnotatorConfig::default(),
            probe: ProbeConfig::default(),
            embed_window: 0,
        }
    }
}

impl PipelineConfig {
    /// Reads `path` (or starts from defaults) and applies `key.path=value`
    /// overrides. Values parse as JSON and fall back to plain strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Validation(format!("config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", p.display())))?
            }
            None => serde_json::to_value(Self::default()).map_err(|e| CliError::Runtime(e.to_string()))?,
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |e: String| CliError::Validation(e);
        self.pretrain.validate().map_err(|e| v(e.to_string()))?;
        self.discriminator.validate().map_err(|e| v(e.to_string()))?;
        self.annotator.validate().map_err(|e| v(e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(v("seeds must not be empty".into()));
        }
        Ok(())
    }

    pub fn normalize_for(&self, ds: &MotionDataset) -> NormalizeConfig {
        self.normalize.clone().unwrap_or_else(|| NormalizeConfig {
            bones: ds.bones(),
            ..NormalizeConfig::default()
        })
    }

    pub fn experiment(&self, ds: &MotionDataset) -> ExperimentConfig {
        ExperimentConfig {
            normalize: self.normalize_for(ds),
            pretrain: self.pretrain.clone(),
            discriminator: self.discriminator.clone(),
            annotator: self.annotator.clone(),
            probe: self.probe.clone(),
            embed_window: self.embed_window,
        }
    }

    pub fn require<'a>(&self, field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, CliError> {
        let p = field
            .as_deref()
            .ok_or_else(|| CliError::Validation(format!("no {name} given (flag or config key `{name}`)")))?;
        if !p.exists() {
            return Err(CliError::Validation(format!("{name} {} does not exist", p.display())));
        }
        Ok(p)
    }
}

/// Sets `a.b.c` in `doc` to `value`, creating objects along the way.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::Validation(format!("override key {key:?} has an empty segment")));
        }
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(CliError::Validation(format!("override {key:?}: {} is not an object", parts[..i].join("."))));
            }
        }
        let map = node.as_object_mut().expect("checked above");
        if i + 1 == parts.len() {
            map.insert((*part).to_owned(), value);
            return Ok(());
        }
        node = map.entry((*part).to_owned()).or_insert(Value::Null);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_reach_nested_keys() {
        let mut doc = json!({"pretrain": {"schedule": {"epochs": 30}}});
        apply_override(&mut doc, "pretrain.schedule.epochs=3").unwrap();
        apply_override(&mut doc, "dataset=data/x").unwrap();
        apply_override(&mut doc, "normalize.root_joint=2").unwrap();
        assert_eq!(doc["pretrain"]["schedule"]["epochs"], 3);
        assert_eq!(doc["dataset"], "data/x");
        assert_eq!(doc["normalize"]["root_joint"], 2);
        assert!(apply_override(&mut doc, "noequals").is_err());
        assert!(apply_override(&mut doc, "dataset.x=1").is_err());
    }

    #[test]
    fn defaults_round_trip_and_unknown_keys_fail() {
        let cfg = PipelineConfig::load(None, &["budget=0.1".into(), "seeds=[3,4]".into()]).unwrap();
        assert_eq!(cfg.budget, Budget::Fraction(0.1));
        assert_eq!(cfg.seeds, vec![3, 4]);
        let err = PipelineConfig::load(None, &["bogus=1".into()]).unwrap_err();
        assert!(matches!(err, CliError::Validation(_)));
        assert!(PipelineConfig::load(None, &["annotator.threshold=2".into()]).is_err());
    }
}
