//! Training-loop behavior: optimization makes progress, the schedule shows
//! up in the log, and evaluation plumbing is the identity it claims to be.

use scarfnet::config::TrainConfig;
use scarfnet::data::{generate_dataset, load_dataset, Difficulty, NUM_CLASSES};
use scarfnet::evaluate::{detect_scenes, evaluate_checkpoint, evaluate_scenes, MAP_IOU};
use scarfnet::train::{restore, train};
use scarfnet_core::detector::eval_map;
use scarfnet_core::FusionKind;

#[derive(serde::Deserialize)]
struct Line {
    iter: u64,
    lr: f32,
    loss_cls: f32,
    loss_reg: f32,
    map: Option<f64>,
}

fn parse_log(log: &str) -> Vec<Line> {
    log.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn loss_halves_within_200_iterations_on_easy_plain() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&dir.path().join("train"), 64, 1000, Difficulty::Easy).unwrap();
    for seed in 0..3 {
        let mut cfg = TrainConfig::default().with_iterations(200);
        cfg.fusion = FusionKind::Plain;
        cfg.train_data = dir.path().join("train");
        cfg.eval_interval = 0;
        cfg.seed = seed;
        let outcome = train(&cfg).unwrap();
        let lines = parse_log(&outcome.log);
        assert_eq!(lines.len(), 200);
        let total = |l: &Line| (l.loss_cls + l.loss_reg) as f64;
        let initial = total(&lines[0]);
        let after = total(&lines[199]);
        assert!(
            after < 0.5 * initial,
            "seed {seed}: loss {after} not below half of initial {initial}"
        );
    }
}

#[test]
fn lr_schedule_boundaries_show_in_log() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&dir.path().join("train"), 16, 2000, Difficulty::Easy).unwrap();
    let mut cfg = TrainConfig::default().with_iterations(40);
    cfg.fusion = FusionKind::Plain;
    cfg.train_data = dir.path().join("train");
    cfg.eval_interval = 0;
    cfg.sgd.lr_schedule = vec![(10, 1e-2), (25, 1e-3), (40, 1e-4)];
    let outcome = train(&cfg).unwrap();
    let lines = parse_log(&outcome.log);
    assert_eq!(lines[9].lr, 1e-2);
    assert_eq!(lines[10].lr, 1e-3);
    assert_eq!(lines[24].lr, 1e-3);
    assert_eq!(lines[25].lr, 1e-4);
    assert_eq!(lines[39].lr, 1e-4);
    assert!(lines.iter().all(|l| l.map.is_none()));
    assert!(lines.iter().enumerate().all(|(i, l)| l.iter == i as u64));
}

#[test]
fn training_set_scores_at_least_holdout_on_average() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&dir.path().join("train"), 48, 3000, Difficulty::Easy).unwrap();
    generate_dataset(&dir.path().join("eval"), 48, 8000, Difficulty::Easy).unwrap();
    let mut train_total = 0.0;
    let mut eval_total = 0.0;
    for seed in 0..3 {
        let mut cfg = TrainConfig::default().with_iterations(250);
        cfg.fusion = FusionKind::Plain;
        cfg.train_data = dir.path().join("train");
        cfg.eval_data = dir.path().join("eval");
        cfg.eval_interval = 0;
        cfg.seed = 40 + seed;
        let outcome = train(&cfg).unwrap();
        train_total += evaluate_checkpoint(&outcome.checkpoint, &cfg.train_data).unwrap().map;
        eval_total += evaluate_checkpoint(&outcome.checkpoint, &cfg.eval_data).unwrap().map;
    }
    assert!(
        train_total >= eval_total,
        "train mAP sum {train_total} below holdout {eval_total}"
    );
}

#[test]
fn report_map_is_the_eval_map_of_decoded_detections() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&dir.path().join("train"), 16, 4000, Difficulty::Easy).unwrap();
    generate_dataset(&dir.path().join("eval"), 10, 9000, Difficulty::Easy).unwrap();
    let mut cfg = TrainConfig::default().with_iterations(20);
    cfg.fusion = FusionKind::Plain;
    cfg.train_data = dir.path().join("train");
    cfg.eval_data = dir.path().join("eval");
    cfg.eval_interval = 0;
    let outcome = train(&cfg).unwrap();

    let (model, store) = restore(&outcome.checkpoint).unwrap();
    let scenes = load_dataset(&cfg.eval_data).unwrap();
    let report = evaluate_scenes(&model, &store, &scenes).unwrap();
    let dets = detect_scenes(&model, &store, &scenes).unwrap();
    let gts: Vec<_> = scenes.iter().map(|s| s.gts()).collect();
    let direct = eval_map(&dets, &gts, NUM_CLASSES, MAP_IOU).unwrap();
    assert_eq!(report.map, direct.map);
    assert_eq!(report.images, scenes.len());
}

#[test]
fn empty_dataset_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("empty")).unwrap();
    assert!(load_dataset(&dir.path().join("empty")).is_err());

    // evaluating a checkpoint against an empty dataset fails, too
    generate_dataset(&dir.path().join("train"), 8, 100, Difficulty::Easy).unwrap();
    let mut cfg = TrainConfig::default().with_iterations(2);
    cfg.fusion = FusionKind::Plain;
    cfg.train_data = dir.path().join("train");
    cfg.eval_interval = 0;
    let outcome = train(&cfg).unwrap();
    assert!(evaluate_checkpoint(&outcome.checkpoint, &dir.path().join("empty")).is_err());
}

#[test]
fn checkpoint_architecture_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&dir.path().join("train"), 8, 200, Difficulty::Easy).unwrap();
    let mut cfg = TrainConfig::default().with_iterations(2);
    cfg.fusion = FusionKind::Plain;
    cfg.train_data = dir.path().join("train");
    cfg.eval_interval = 0;
    let outcome = train(&cfg).unwrap();
    // lie about the architecture: the stored tensors no longer fit
    let mut ckpt = outcome.checkpoint.clone();
    ckpt.config.fusion = FusionKind::ScarfFull;
    assert!(restore(&ckpt).is_err());
}
