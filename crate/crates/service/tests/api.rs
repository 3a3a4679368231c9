use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use mocurate::data::{LabelMatrix, MotionDataset, MotionSequence, SkeletonFrame};
use mocurate::encoder::FeatureVector;
use mocurate::rank::random_ranking;
use mocurate_service::{router, Interval, JobState, LabelRequest, ServiceConfig, Session, SharedSession};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::io::Read;
use std::sync::{Arc, RwLock};
use std::time::Duration;
use tower::ServiceExt;

const CLASSES: [&str; 3] = ["walk", "wave", "jump"];

fn dataset(n: usize, frames: usize) -> MotionDataset {
    let sequences = (0..n)
        .map(|i| MotionSequence {
            id: format!("s{i:02}"),
            fps: 30.0,
            frames: (0..frames)
                .map(|t| SkeletonFrame::new(vec![[i as f64, t as f64, 0.0], [i as f64, t as f64, 1.0]]))
                .collect(),
        })
        .collect();
    MotionDataset {
        sequences,
        class_names: CLASSES.iter().map(|s| s.to_string()).collect(),
        joint_names: vec!["root".into(), "head".into()],
        parents: Some(vec![-1, 0]),
        fps: 30.0,
    }
}

/// Frame features that encode the frame's position in its sequence.
fn features(ds: &MotionDataset) -> BTreeMap<String, Vec<FeatureVector>> {
    ds.sequences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let f = (0..s.len())
                .map(|t| FeatureVector::normalized(vec![1.0, (t as f64 / 5.0).sin(), (t as f64 / 7.0).cos(), i as f64 * 0.01]))
                .collect();
            (s.id.clone(), f)
        })
        .collect()
}

fn session_with(n: usize, frames: usize, cfg: ServiceConfig) -> Session {
    let ds = dataset(n, frames);
    let f = features(&ds);
    let ranking = random_ranking(&ds.ids(), 3);
    Session::new(ds, f, ranking, cfg).unwrap()
}

fn quick_config() -> ServiceConfig {
    let mut c = ServiceConfig::default();
    c.annotator.hidden = 16;
    c.annotator.epochs = 5;
    c
}

fn shared(s: Session) -> SharedSession {
    Arc::new(RwLock::new(s))
}

async fn call(s: &SharedSession, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(Arc::clone(s)).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn call_json(s: &SharedSession, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (st, b) = call(s, method, uri, body).await;
    (st, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn wait_done(s: &SharedSession, job: u64) -> Value {
    for _ in 0..2000 {
        let (st, v) = call_json(s, "GET", &format!("/status/{job}"), None).await;
        assert_eq!(st, StatusCode::OK);
        if v["state"] != "running" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("job {job} never finished");
}

fn queue_ids(v: &Value) -> Vec<String> {
    v.as_array().unwrap().iter().map(|q| q["id"].as_str().unwrap().to_owned()).collect()
}

fn tar_entries(bytes: &[u8]) -> Vec<(String, u64, Vec<u8>)> {
    let mut a = tar::Archive::new(bytes);
    a.entries()
        .unwrap()
        .map(|e| {
            let mut e = e.unwrap();
            let path = e.path().unwrap().to_string_lossy().into_owned();
            let mtime = e.header().mtime().unwrap();
            let mut data = Vec::new();
            e.read_to_end(&mut data).unwrap();
            (path, mtime, data)
        })
        .collect()
}

#[tokio::test]
async fn fresh_queue_is_the_full_ranking_and_labelled_ids_leave_it() {
    let session = session_with(6, 30, quick_config());
    let order = session.ranking().order.clone();
    let s = shared(session);
    let (st, v) = call_json(&s, "GET", "/queue", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(queue_ids(&v), order);
    assert_eq!(v[0]["position"], 1);
    assert!(v[0]["score"].is_null());

    let body = json!({"id": order[0], "intervals": [[1, 5, "walk"]]});
    assert_eq!(call(&s, "POST", "/labels", Some(body)).await.0, StatusCode::OK);
    let body = json!({"id": order[3], "intervals": []});
    assert_eq!(call(&s, "POST", "/labels", Some(body)).await.0, StatusCode::OK);
    let (_, v) = call_json(&s, "GET", "/queue", None).await;
    let expected: Vec<String> = order.iter().enumerate().filter(|(i, _)| *i != 0 && *i != 3).map(|(_, id)| id.clone()).collect();
    assert_eq!(queue_ids(&v), expected);
    assert_eq!(v[0]["position"], 2);
}

#[tokio::test]
async fn empty_dataset_has_an_empty_queue() {
    let s = shared(session_with(0, 30, quick_config()));
    let (st, v) = call_json(&s, "GET", "/queue", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v, json!([]));
}

#[tokio::test]
async fn sequence_lookup() {
    let s = shared(session_with(3, 30, quick_config()));
    let (st, v) = call_json(&s, "GET", "/sequence/s01", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["frames"].as_array().unwrap().len(), 30);
    assert_eq!(v["frames"][4], json!([[1.0, 4.0, 0.0], [1.0, 4.0, 1.0]]));
    assert_eq!(v["fps"], 30.0);
    assert!(v["labels"].is_null() && v["predictions"].is_null());
    let (st, v) = call_json(&s, "GET", "/sequence/nope", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert!(v["error"].as_str().unwrap().contains("nope"));
}

#[tokio::test]
async fn interval_expands_to_inclusive_rows() {
    let s = shared(session_with(2, 30, quick_config()));
    let (st, v) = call_json(&s, "POST", "/labels", Some(json!({"id": "s00", "intervals": [[10, 20, "wave"]]}))).await;
    assert_eq!(st, StatusCode::OK);
    let m: LabelMatrix = serde_json::from_value(v).unwrap();
    assert_eq!(m.num_frames(), 30);
    for (t, row) in m.labels.iter().enumerate() {
        let frame = t + 1;
        let wave = (10..=20).contains(&frame) as u8;
        assert_eq!(row, &vec![0, wave, 0], "frame {frame}");
    }
    let (_, v) = call_json(&s, "GET", "/sequence/s00", None).await;
    assert_eq!(v["labels"]["labels"][9], json!([0, 1, 0]));
}

#[tokio::test]
async fn overlapping_intervals_are_multi_label() {
    let s = shared(session_with(2, 30, quick_config()));
    let body = json!({"id": "s01", "intervals": [
        {"start_frame": 10, "end_frame": 20, "class": "walk"},
        [15, 25, "wave"]
    ]});
    let (st, v) = call_json(&s, "POST", "/labels", Some(body)).await;
    assert_eq!(st, StatusCode::OK);
    let m: LabelMatrix = serde_json::from_value(v).unwrap();
    for frame in 1..=30usize {
        let row = &m.labels[frame - 1];
        assert_eq!(row[0], (10..=20).contains(&frame) as u8);
        assert_eq!(row[1], (15..=25).contains(&frame) as u8);
        assert_eq!(row[2], 0);
    }
    assert_eq!(m.labels[16], vec![1, 1, 0]);
}

#[tokio::test]
async fn invalid_label_requests() {
    let s = shared(session_with(2, 30, quick_config()));
    let cases = [
        (json!({"id": "s00", "intervals": [[20, 10, "walk"]]}), StatusCode::BAD_REQUEST),
        (json!({"id": "s00", "intervals": [[0, 10, "walk"]]}), StatusCode::BAD_REQUEST),
        (json!({"id": "s00", "intervals": [[5, 31, "walk"]]}), StatusCode::BAD_REQUEST),
        (json!({"id": "s00", "intervals": [[5, 10, "swim"]]}), StatusCode::BAD_REQUEST),
        (json!({"id": "s00"}), StatusCode::BAD_REQUEST),
        (json!({"id": "zz", "intervals": []}), StatusCode::NOT_FOUND),
    ];
    for (body, expected) in cases {
        let (st, _) = call(&s, "POST", "/labels", Some(body.clone())).await;
        assert_eq!(st, expected, "{body}");
    }
    assert!(s.read().unwrap().labels().is_empty(), "rejected requests store nothing");
}

#[tokio::test]
async fn retrain_without_labels_is_rejected() {
    let s = shared(session_with(3, 30, quick_config()));
    let (st, v) = call_json(&s, "POST", "/retrain", None).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("no labelled"));
    assert_eq!(call(&s, "GET", "/status/1", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn retrain_reaches_done_and_fills_predictions() {
    let s = shared(session_with(4, 30, quick_config()));
    for id in ["s00", "s01"] {
        let body = json!({"id": id, "intervals": [[1, 15, "walk"], [16, 30, "jump"]]});
        assert_eq!(call(&s, "POST", "/labels", Some(body)).await.0, StatusCode::OK);
    }
    let (st, v) = call_json(&s, "POST", "/retrain", None).await;
    assert_eq!(st, StatusCode::ACCEPTED);
    let job = v["job_id"].as_u64().unwrap();
    let status = wait_done(&s, job).await;
    assert_eq!(status["state"], "done", "{status}");
    assert!(status["duration"].as_f64().unwrap() > 0.0);
    assert_eq!(status["labelled_sequences"], 2);
    assert_eq!(status["labelled_frames"], 60);
    let fit = status["eval_on_labeled"]["micro_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&fit));

    let (_, v) = call_json(&s, "GET", "/sequence/s02", None).await;
    assert_eq!(v["predictions"]["labels"].as_array().unwrap().len(), 30);
    let (_, v) = call_json(&s, "GET", "/sequence/s00", None).await;
    assert!(v["predictions"].is_null(), "labelled sequences get no prediction");
    let (_, v) = call_json(&s, "GET", "/history", None).await;
    assert_eq!(v.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn concurrent_retrain_is_a_conflict() {
    let mut cfg = quick_config();
    cfg.annotator.epochs = 20000;
    let s = shared(session_with(4, 30, cfg));
    let body = json!({"id": "s00", "intervals": [[1, 15, "walk"]]});
    call(&s, "POST", "/labels", Some(body)).await;
    let (st, v) = call_json(&s, "POST", "/retrain", None).await;
    assert_eq!(st, StatusCode::ACCEPTED);
    let (st, _) = call(&s, "POST", "/retrain", None).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let done = wait_done(&s, v["job_id"].as_u64().unwrap()).await;
    assert_eq!(done["state"], "done");
    let (st, v) = call_json(&s, "POST", "/retrain", None).await;
    assert_eq!(st, StatusCode::ACCEPTED, "a finished job frees the worker");
    assert_eq!(v["job_id"], 2);
}

#[test]
fn one_job_in_flight() {
    let mut s = session_with(3, 30, quick_config());
    s.submit_labels(&LabelRequest {
        id: "s00".into(),
        intervals: vec![Interval::Tuple(1, 30, "walk".into())],
    })
    .unwrap();
    let job = s.begin_retrain().unwrap();
    assert!(matches!(s.begin_retrain(), Err(mocurate_service::ServiceError::Conflict(_))));
    s.finish_retrain(job.run());
    assert!(s.begin_retrain().is_ok());
}

#[test]
fn retrain_uses_the_label_snapshot() {
    let mut s = session_with(4, 30, quick_config());
    let label = |id: &str, class: &str| LabelRequest {
        id: id.into(),
        intervals: vec![Interval::Tuple(1, 30, class.into())],
    };
    s.submit_labels(&label("s00", "walk")).unwrap();
    let job = s.begin_retrain().unwrap();
    s.submit_labels(&label("s01", "wave")).unwrap();
    s.finish_retrain(job.run());
    let st = s.status(1).unwrap();
    assert_eq!(st.state, JobState::Done);
    assert_eq!(st.labelled_sequences, 1);
    // s01 was unlabelled at job start, so it still carries a prediction
    assert!(s.predictions().contains_key("s01"));
    assert!(!s.predictions().contains_key("s00"));
    assert_eq!(s.predictions().len(), 3);
}

#[tokio::test]
async fn export_of_empty_session_holds_only_the_manifest() {
    let s = shared(session_with(3, 30, quick_config()));
    let (st, bytes) = call(&s, "GET", "/export", None).await;
    assert_eq!(st, StatusCode::OK);
    let entries = tar_entries(&bytes);
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0].0, "manifest.json");
    let m: Value = serde_json::from_slice(&entries[0].2).unwrap();
    assert_eq!(m["labels"], json!([]));
    assert_eq!(m["class_names"], json!(CLASSES));
}

#[tokio::test]
async fn export_contains_labels_and_predictions_deterministically() {
    let s = shared(session_with(2, 30, quick_config()));
    call(&s, "POST", "/labels", Some(json!({"id": "s00", "intervals": [[1, 10, "walk"]]}))).await;
    let (_, v) = call_json(&s, "POST", "/retrain", None).await;
    wait_done(&s, v["job_id"].as_u64().unwrap()).await;
    let (_, a) = call(&s, "GET", "/export", None).await;
    let (_, b) = call(&s, "GET", "/export", None).await;
    assert_eq!(a, b);
    let entries = tar_entries(&a);
    let names: Vec<&str> = entries.iter().map(|e| e.0.as_str()).collect();
    assert_eq!(names, ["manifest.json", "labels/s00.json", "predictions/s01.json"]);
    assert!(entries.iter().all(|e| e.1 == 0));
    let stored: LabelMatrix = serde_json::from_slice(&entries[1].2).unwrap();
    assert_eq!(&stored, &s.read().unwrap().labels()["s00"]);
    let predicted: LabelMatrix = serde_json::from_slice(&entries[2].2).unwrap();
    assert_eq!(predicted.sequence_id, "s01");
    assert_eq!(predicted.num_frames(), 30);
}

#[tokio::test]
async fn class_reload_keeps_ranking_and_drops_the_annotator() {
    let s = shared(session_with(3, 30, quick_config()));
    call(&s, "POST", "/labels", Some(json!({"id": "s00", "intervals": [[1, 10, "wave"]]}))).await;
    let (_, v) = call_json(&s, "POST", "/retrain", None).await;
    wait_done(&s, v["job_id"].as_u64().unwrap()).await;
    let (_, before) = call_json(&s, "GET", "/queue", None).await;

    let mut cfg = quick_config();
    cfg.class_names = Some(["run", "wave", "walk", "kick", "jump", "sit"].iter().map(|c| c.to_string()).collect());
    let (st, v) = call_json(&s, "POST", "/reload", Some(serde_json::to_value(&cfg).unwrap())).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["classes_changed"], true);
    assert_eq!(v["annotator_invalidated"], true);
    {
        let g = s.read().unwrap();
        assert!(!g.has_annotator());
        assert!(g.predictions().is_empty());
        // old "wave" column moved to index 1 of the new class list
        assert_eq!(g.labels()["s00"].labels[0], vec![0, 1, 0, 0, 0, 0]);
    }
    let (_, after) = call_json(&s, "GET", "/queue", None).await;
    assert_eq!(before, after);
    let (st, v) = call_json(&s, "POST", "/labels", Some(json!({"id": "s01", "intervals": [[3, 4, "kick"]]}))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["labels"][2], json!([0, 0, 0, 1, 0, 0]));
    let (_, v) = call_json(&s, "POST", "/retrain", None).await;
    assert_eq!(wait_done(&s, v["job_id"].as_u64().unwrap()).await["state"], "done");
}

#[tokio::test]
async fn reload_rereads_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("service.json");
    std::fs::write(&path, r#"{"class_names": ["walk", "wave", "jump"]}"#).unwrap();
    let session = session_with(2, 30, quick_config()).with_config_path(&path);
    let s = shared(session);
    let (_, v) = call_json(&s, "POST", "/reload", None).await;
    assert_eq!(v["classes_changed"], false);
    std::fs::write(&path, r#"{"class_names": ["walk", "wave", "jump", "sit"]}"#).unwrap();
    let (st, v) = call_json(&s, "POST", "/reload", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["class_names"], json!(["walk", "wave", "jump", "sit"]));
    std::fs::write(&path, r#"{"class_names": ["a", "a"]}"#).unwrap();
    assert_eq!(call(&s, "POST", "/reload", None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(s.read().unwrap().class_names().len(), 4);
}

#[test]
fn retrain_started_before_a_class_change_is_not_served() {
    let mut s = session_with(3, 30, quick_config());
    s.submit_labels(&LabelRequest {
        id: "s00".into(),
        intervals: vec![Interval::Tuple(1, 30, "walk".into())],
    })
    .unwrap();
    let job = s.begin_retrain().unwrap();
    let mut cfg = quick_config();
    cfg.class_names = Some(vec!["walk".into(), "sit".into()]);
    s.reload(Some(cfg)).unwrap();
    s.finish_retrain(job.run());
    let st = s.status(1).unwrap();
    assert_eq!(st.state, JobState::Failed);
    assert!(!s.has_annotator());
}

#[test]
fn session_dir_persists_labels() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = session_with(3, 30, quick_config()).with_session_dir(dir.path()).unwrap();
    s.submit_labels(&LabelRequest {
        id: "s02".into(),
        intervals: vec![Interval::Tuple(2, 3, "jump".into())],
    })
    .unwrap();
    let restored = session_with(3, 30, quick_config()).with_session_dir(dir.path()).unwrap();
    assert_eq!(restored.labels(), s.labels());
    assert_eq!(restored.queue().len(), 2);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let ds = dataset(3, 30);
    let mut f = features(&ds);
    let ranking = random_ranking(&ds.ids(), 0);
    let mut short = ranking.clone();
    short.order.pop();
    assert!(Session::new(ds.clone(), f.clone(), short, ServiceConfig::default()).is_err());
    f.get_mut("s01").unwrap().pop();
    assert!(Session::new(ds, f, ranking, ServiceConfig::default()).is_err());
}
