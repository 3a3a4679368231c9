//! Byte-deterministic label archive.

use crate::ServiceError;
use mocurate::data::LabelMatrix;
use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Serialize)]
struct ExportManifest<'a> {
    class_names: &'a [String],
    labels: Vec<&'a str>,
    predictions: Vec<&'a str>,
}

fn append(b: &mut tar::Builder<Vec<u8>>, path: &str, data: &[u8]) -> Result<(), ServiceError> {
    let mut h = tar::Header::new_ustar();
    h.set_size(data.len() as u64);
    h.set_mode(0o644);
    h.set_mtime(0);
    h.set_uid(0);
    h.set_gid(0);
    h.set_entry_type(tar::EntryType::Regular);
    b.append_data(&mut h, path, data).map_err(|e| ServiceError::Internal(e.to_string()))
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>, ServiceError> {
    serde_json::to_vec(v).map_err(|e| ServiceError::Internal(e.to_string()))
}

/// `manifest.json`, then `labels/<id>.json` and `predictions/<id>.json` in
/// id order, all with zero timestamps and owners.
pub fn archive(
    class_names: &[String],
    labels: &BTreeMap<String, LabelMatrix>,
    predictions: &BTreeMap<String, LabelMatrix>,
) -> Result<Vec<u8>, ServiceError> {
    let mut b = tar::Builder::new(Vec::new());
    let manifest = ExportManifest {
        class_names,
        labels: labels.keys().map(String::as_str).collect(),
        predictions: predictions.keys().map(String::as_str).collect(),
    };
    append(&mut b, "manifest.json", &json(&manifest)?)?;
    for (dir, set) in [("labels", labels), ("predictions", predictions)] {
        for (id, m) in set {
            append(&mut b, &format!("{dir}/{id}.json"), &json(m)?)?;
        }
    }
    b.into_inner().map_err(|e| ServiceError::Internal(e.to_string()))
}
