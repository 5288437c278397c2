//! Detection evaluation (VOC-style mAP at IoU 0.5) over a scene set.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use scarfnet_core::detector::{decode_nms, eval_map, Detection};
use scarfnet_core::{ParamStore, Tape};

use crate::checkpoint::Checkpoint;
use crate::data::{load_dataset, SceneSample, CLASS_NAMES, IMAGE_SIZE, NUM_CLASSES};
use crate::error::Result;
use crate::model::Model;
use crate::train::restore;

pub const CONF_THR: f64 = 0.05;
pub const NMS_IOU: f64 = 0.45;
pub const TOPK: usize = 100;
pub const MAP_IOU: f64 = 0.5;

/// Evaluation report, serialized as the `eval` subcommand's JSON output.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub map: f64,
    /// Per class name; null when the class has no ground-truth instances.
    pub per_class: BTreeMap<String, Option<f64>>,
    pub images: usize,
}

/// Exported detection line (`{image_id, class, score, box}` JSON objects).
#[derive(Clone, Debug, Serialize)]
pub struct DetectionLine {
    pub image_id: usize,
    pub class: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub rect: [f64; 4],
}

/// Decode the detections of every scene, in scene order.
pub fn detect_scenes(
    model: &Model,
    store: &ParamStore<f32>,
    scenes: &[SceneSample],
) -> Result<Vec<Vec<Detection>>> {
    let bound = store.snapshot();
    scenes
        .par_iter()
        .map(|scene| {
            let mut tape = Tape::new();
            let (cls, reg) = model.forward_rows(&mut tape, &bound, &scene.image)?;
            let cls64: Vec<f64> = cls.data().iter().map(|&v| v as f64).collect();
            let reg64: Vec<f64> = reg.data().iter().map(|&v| v as f64).collect();
            Ok(decode_nms(
                &cls64,
                &reg64,
                &model.anchors,
                NUM_CLASSES,
                (IMAGE_SIZE, IMAGE_SIZE),
                CONF_THR,
                NMS_IOU,
                TOPK,
            ))
        })
        .collect()
}

pub fn evaluate_scenes(
    model: &Model,
    store: &ParamStore<f32>,
    scenes: &[SceneSample],
) -> Result<EvalReport> {
    let detections = detect_scenes(model, store, scenes)?;
    let gts: Vec<_> = scenes.iter().map(|s| s.gts()).collect();
    let report = eval_map(&detections, &gts, NUM_CLASSES, MAP_IOU)?;
    let per_class = CLASS_NAMES
        .iter()
        .zip(&report.per_class)
        .map(|(name, ap)| (name.to_string(), *ap))
        .collect();
    Ok(EvalReport { map: report.map, per_class, images: scenes.len() })
}

/// Evaluate a checkpoint against a dataset directory.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, data_dir: &std::path::Path) -> Result<EvalReport> {
    let scenes = load_dataset(data_dir)?;
    let (model, store) = restore(ckpt)?;
    evaluate_scenes(&model, &store, &scenes)
}

/// Detections of every scene as exportable JSON lines.
pub fn detection_lines(
    model: &Model,
    store: &ParamStore<f32>,
    scenes: &[SceneSample],
) -> Result<String> {
    let per_image = detect_scenes(model, store, scenes)?;
    let mut out = String::new();
    for (image_id, dets) in per_image.iter().enumerate() {
        for d in dets {
            let line = DetectionLine {
                image_id,
                class: d.class,
                score: d.score,
                rect: [d.rect.x1, d.rect.y1, d.rect.x2, d.rect.y2],
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
    }
    Ok(out)
}
