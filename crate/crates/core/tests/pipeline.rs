//! The library stages chained on a small benchmark, through disk.

use mocurate::checkpoint::Checkpoint;
use mocurate::data::{load_dataset, load_labels_dir, normalize_dataset, save_dataset, save_labels_dir};
use mocurate::experiments::{benchmark_config, embed_dataset, evaluate_prefix, selection_prefix, Selection, SweepInputs};
use mocurate::pretrain::pretrain;
use mocurate::rank::{prefix, Budget};
use mocurate::synth::{generate, BenchmarkConfig};

#[test]
fn synth_to_predictions_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let bench = generate(&BenchmarkConfig {
        sequences: 16,
        min_frames: 60,
        max_frames: 90,
        seed: 3,
        ..BenchmarkConfig::default()
    });
    save_dataset(&bench.dataset, dir.path()).unwrap();
    save_labels_dir(bench.labels.values(), dir.path().join("labels")).unwrap();
    let raw = load_dataset(dir.path()).unwrap();
    let truth = load_labels_dir(dir.path().join("labels")).unwrap();
    assert_eq!(raw.ids(), bench.dataset.ids());
    assert_eq!(truth, bench.labels);

    let mut cfg = benchmark_config();
    cfg.pretrain.schedule.epochs = 1;
    cfg.pretrain.encoder.embed_dim = 8;
    cfg.pretrain.encoder.feature_dim = 8;
    cfg.pretrain.encoder.heads = 2;
    cfg.pretrain.augmentation.n_ds = 16;
    cfg.pretrain.encoder.max_frames = 16;
    cfg.annotator.hidden = 16;
    cfg.discriminator.epochs = 3;
    let ds = normalize_dataset(&raw, &cfg.normalize).unwrap();
    let out = pretrain(&ds, &cfg.pretrain).unwrap();
    assert_eq!(out.curve.len(), ds.len());

    let path = dir.path().join("encoder.mockpt");
    Checkpoint::from_output(&cfg.pretrain, &out).save(&path).unwrap();
    let restored = Checkpoint::load(&path).unwrap();
    let emb = embed_dataset(&restored.encoder(), &ds, &cfg.pretrain.augmentation, cfg.window()).unwrap();
    for s in &ds.sequences {
        assert_eq!(emb.frames[&s.id].len(), s.len());
    }

    let inputs = SweepInputs {
        embeddings: &emb,
        truth: &truth,
        dataset: None,
        discriminator: &cfg.discriminator,
        annotator: &cfg.annotator,
    };
    let ranking = selection_prefix(&inputs, Selection::Ranked, 1, ds.len()).unwrap();
    assert!(ranking.is_permutation_of(&ds.ids()));
    let labelled = prefix(&ranking, Budget::Fraction(0.25)).unwrap();
    assert_eq!(labelled.len(), 4);
    let report = evaluate_prefix(&emb, &truth, &labelled, &cfg.annotator).unwrap();
    assert!((0.0..=1.0).contains(&report.micro_f1));
    assert!(report.frames > 0);
}
