//! End-to-end pipeline checks on a miniature configuration: the full stage
//! chain, prerequisite enforcement, rerun determinism, and the fine-tune
//! pass-through switch.

use vad_core::config::{CalibrationConfig, GeneratorConfig, RunConfig};
use vad_core::cvae::FinetuneHyper;
use vad_core::error::VadError;
use vad_core::pipeline::{self, Run, Stage};

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 11;
    cfg.frame_height = 32;
    cfg.frame_width = 32;
    cfg.generator = GeneratorConfig {
        train_scenarios: 3,
        test_scenarios: 2,
        frames_per_scenario: 60,
        agents: 1,
        braking_onset_range: (14, 18),
        ..GeneratorConfig::default()
    };
    cfg.flow.params.iterations = 40;
    cfg.memae.widths = [8, 16, 32];
    cfg.memae.num_slots = 16;
    cfg.memae.epochs = 2;
    cfg.memae.max_cubes = 40;
    cfg.cvae.widths = [8, 16, 32];
    cfg.cvae.z_dim = 16;
    cfg.cvae.epochs = 2;
    cfg.cvae.max_cubes = 40;
    cfg.finetune.hyper = FinetuneHyper {
        epochs: 1,
        max_cubes: 24,
        ..FinetuneHyper::default()
    };
    cfg.calibration = CalibrationConfig { max_cubes: 60 };
    cfg
}

fn read(path: &std::path::Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

#[test]
fn run_all_produces_report_bundle() {
    let dir = tempfile::tempdir().unwrap();
    pipeline::run_all(dir.path(), tiny_config()).unwrap();

    let report = dir.path().join("report");
    assert!(report.join("metrics.csv").exists());
    assert!(report.join("roc_gt.csv").exists());
    assert!(report.join("timeline_test_000.csv").exists());
    assert!(report.join("timeline_test_001.csv").exists());
    let heatmaps: Vec<_> = std::fs::read_dir(&report)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("heatmap_"))
        .collect();
    assert_eq!(heatmaps.len(), 2);

    let metrics = String::from_utf8(read(&report.join("metrics.csv"))).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "condition,variant,scope,auroc,fpr95_pixel,mean_iou"
    );
    // One pooled row per condition x variant at minimum.
    let pooled = metrics
        .lines()
        .filter(|l| l.contains(",pooled,"))
        .count();
    assert_eq!(pooled, 3 * 3);

    // The gt condition scores boxes identical to ground truth: IoU 1.
    let gt_default = metrics
        .lines()
        .find(|l| l.starts_with("gt,default,pooled"))
        .unwrap();
    let iou: f64 = gt_default.split(',').last().unwrap().parse().unwrap();
    assert!((iou - 1.0).abs() < 1e-9);
}

#[test]
fn stages_enforce_prerequisites_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::open(dir.path(), tiny_config()).unwrap();
    match pipeline::run_stage(&run, Stage::Score) {
        Err(VadError::MissingPrerequisite(msg)) => {
            assert!(msg.contains("calibrate"), "message should name the stage: {msg}");
        }
        other => panic!("expected missing prerequisite, got {other:?}"),
    }
    match pipeline::run_stage(&run, Stage::Flow) {
        Err(VadError::MissingPrerequisite(msg)) => {
            assert!(msg.contains("gen"), "message should name the stage: {msg}");
        }
        other => panic!("expected missing prerequisite, got {other:?}"),
    }
}

#[test]
fn rerun_from_same_config_is_byte_identical() {
    let cfg = tiny_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline::run_all(a.path(), cfg.clone()).unwrap();
    pipeline::run_all(b.path(), cfg).unwrap();
    for rel in [
        "report/metrics.csv",
        "report/roc_gt.csv",
        "calibrate/stats.json",
        "train-flowae/checkpoint.vadt",
        "finetune/cvae.vadt",
        "score/gt/test_000/maps_default.vadt",
    ] {
        assert_eq!(
            read(&a.path().join(rel)),
            read(&b.path().join(rel)),
            "{rel} differs between reruns"
        );
    }
}

#[test]
fn disabled_finetune_passes_checkpoints_through() {
    let mut cfg = tiny_config();
    cfg.finetune.enabled = false;
    let dir = tempfile::tempdir().unwrap();
    let run = Run::open(dir.path(), cfg).unwrap();
    for stage in [
        Stage::Gen,
        Stage::Flow,
        Stage::TrainFlowAe,
        Stage::TrainCvae,
        Stage::Finetune,
    ] {
        pipeline::run_stage(&run, stage).unwrap();
    }
    assert_eq!(
        read(&dir.path().join("train-flowae/checkpoint.vadt")),
        read(&dir.path().join("finetune/memae.vadt"))
    );
    assert_eq!(
        read(&dir.path().join("train-cvae/checkpoint.vadt")),
        read(&dir.path().join("finetune/cvae.vadt"))
    );
}

#[test]
fn tampered_calibration_hash_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let run = Run::open(dir.path(), cfg).unwrap();
    for stage in [
        Stage::Gen,
        Stage::Flow,
        Stage::TrainFlowAe,
        Stage::TrainCvae,
        Stage::Finetune,
        Stage::Calibrate,
    ] {
        pipeline::run_stage(&run, stage).unwrap();
    }
    let stats_path = dir.path().join("calibrate/stats.json");
    let mut value: serde_json::Value =
        serde_json::from_slice(&read(&stats_path)).unwrap();
    value["config_hash"] = serde_json::json!("0000deadbeef");
    std::fs::write(&stats_path, serde_json::to_vec_pretty(&value).unwrap()).unwrap();
    match pipeline::run_stage(&run, Stage::Score) {
        Err(VadError::MissingPrerequisite(msg)) => {
            assert!(msg.contains("config hash"), "{msg}");
        }
        other => panic!("expected rejection, got {other:?}"),
    }
}

#[test]
fn run_dir_rejects_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    Run::open(dir.path(), cfg.clone()).unwrap();
    let mut other = cfg;
    other.seed = 999;
    match Run::open(dir.path(), other) {
        Err(VadError::Config(msg)) => assert!(msg.contains("different config")),
        Err(other) => panic!("expected config error, got {other:?}"),
        Ok(_) => panic!("expected config error, run opened"),
    }
}
