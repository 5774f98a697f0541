use std::fs;
use std::path::Path;

use hccm::data::{generate_dataset, read_dataset, split_records, write_dataset, GenConfig, SceneRecord, Split, SplitSizes};
use hccm::encoders::Vocab;
use hccm::eval::evaluate;
use hccm::train::{fit, load_checkpoint, load_params, TrainConfig, BEST_DIR, EPOCH_LOG, LAST_DIR, STEP_LOG};
use hccm::verify::micro_model;

fn tiny_data() -> Vec<SceneRecord> {
    let cfg = GenConfig {
        image_size: 16,
        grid: 4,
        max_regions: 2,
        splits: SplitSizes { train: 12, val: 8, test: 8, heldout: 8 },
        seed: 3,
        ..GenConfig::default()
    };
    generate_dataset(&cfg).unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 4, queue_capacity: 8, model: micro_model(), ..TrainConfig::default() }
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn dataset_round_trips_and_regenerates_identically() {
    let recs = tiny_data();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(&recs, a.path()).unwrap();
    write_dataset(&tiny_data(), b.path()).unwrap();
    assert_eq!(fs::read(a.path().join("manifest.jsonl")).unwrap(), fs::read(b.path().join("manifest.jsonl")).unwrap());
    let back = read_dataset(a.path()).unwrap();
    assert_eq!(back, recs);
}

#[test]
fn training_writes_logs_and_checkpoints() {
    let recs = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let summary = fit(tiny_config(), &recs, dir.path(), false).unwrap();
    assert!(summary.finished);
    assert_eq!(summary.steps, 6);
    assert_eq!(read(&dir.path().join(STEP_LOG)).lines().count(), 6);
    assert_eq!(read(&dir.path().join(EPOCH_LOG)).lines().count(), 2);
    for line in read(&dir.path().join(STEP_LOG)).lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let total = v["total"].as_f64().unwrap();
        assert!(total.is_finite() && total > 0.0, "{line}");
    }
    let (state, meta) = load_checkpoint::<f32>(&dir.path().join(LAST_DIR)).unwrap();
    assert_eq!(state.step, 6);
    assert_eq!(meta.epochs_done, 2);
    assert!(dir.path().join(BEST_DIR).join("index.json").exists());
}

#[test]
fn resumed_run_continues_identically() {
    let recs = tiny_data();
    let (whole, split) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    fit(tiny_config(), &recs, whole.path(), false).unwrap();

    let stop = TrainConfig { max_steps: Some(4), ..tiny_config() };
    let partial = fit(stop, &recs, split.path(), false).unwrap();
    assert!(!partial.finished);
    assert_eq!(partial.steps, 4);
    // a stray line as if the process died after logging a step it never saved
    let log = split.path().join(STEP_LOG);
    fs::write(&log, read(&log) + "{\"step\":5,\"total\":0}\n").unwrap();
    fit(tiny_config(), &recs, split.path(), true).unwrap();

    assert_eq!(read(&whole.path().join(STEP_LOG)), read(&split.path().join(STEP_LOG)));
    assert_eq!(read(&whole.path().join(EPOCH_LOG)), read(&split.path().join(EPOCH_LOG)));
    let (a, _) = load_checkpoint::<f32>(&whole.path().join(LAST_DIR)).unwrap();
    let (b, _) = load_checkpoint::<f32>(&split.path().join(LAST_DIR)).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.shadow.params, b.shadow.params);
    assert_eq!(a.queue_v.rows(), b.queue_v.rows());
}

#[test]
fn identical_configs_train_identically() {
    let recs = tiny_data();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    fit(tiny_config(), &recs, a.path(), false).unwrap();
    fit(tiny_config(), &recs, b.path(), false).unwrap();
    assert_eq!(read(&a.path().join(STEP_LOG)), read(&b.path().join(STEP_LOG)));
    assert_eq!(read(&a.path().join(EPOCH_LOG)), read(&b.path().join(EPOCH_LOG)));
}

#[test]
fn heldout_split_is_evaluable_without_retraining() {
    let recs = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    fit(tiny_config(), &recs, dir.path(), false).unwrap();
    let (params, cfg) = load_params::<f32>(&dir.path().join(BEST_DIR)).unwrap();
    let held = split_records(&recs, Split::Heldout);
    let report = evaluate(&held, &params, &cfg.model, &Vocab::builtin(), 0).unwrap();
    assert_eq!(report.queries, held.len());
    let mean = (report.image_query.r1 + report.image_query.r5 + report.image_query.r10
        + report.text_query.r1 + report.text_query.r5 + report.text_query.r10)
        / 6.0;
    assert!((report.mr - mean).abs() < 1e-12);
    let reranked = evaluate(&held, &params, &cfg.model, &Vocab::builtin(), 3).unwrap();
    assert_eq!(reranked.rerank, 3);
}

#[test]
fn toggled_off_terms_log_zero() {
    let recs = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.apply_toggle("rg_itc=off").unwrap();
    cfg.apply_toggle("rg_itm=off").unwrap();
    fit(cfg, &recs, dir.path(), false).unwrap();
    for line in read(&dir.path().join(STEP_LOG)).lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["rg_itc"].as_f64(), Some(0.0));
        assert_eq!(v["rg_itm"].as_f64(), Some(0.0));
        assert_eq!(v["box"].as_f64(), Some(0.0));
    }
}
