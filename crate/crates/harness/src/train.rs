//! Training loop: mini-batch SGD over synthetic scenes with deterministic
//! batch-parallel gradient accumulation and a JSON-lines metrics log.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use scarfnet_core::detector::{detection_loss, match_anchors, MatchResult};
use scarfnet_core::{ParamStore, Sgd, Tape};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{load_dataset, SceneSample};
use crate::error::{HarnessError, Result};
use crate::evaluate::evaluate_scenes;
use crate::model::{build_model, Model};

pub const POS_IOU_THR: f64 = 0.5;
pub const NEG_IOU_THR: f64 = 0.4;
pub const HARD_NEG_RATIO: usize = 3;

/// One metrics log line; `map` is null except on evaluation iterations.
#[derive(Serialize)]
struct MetricsLine {
    iter: u64,
    lr: f32,
    loss_cls: f32,
    loss_reg: f32,
    map: Option<f64>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// JSON-lines metrics, one object per iteration.
    pub log: String,
    /// mAP of the final evaluation (None when evaluation is disabled).
    pub final_map: Option<f64>,
}

/// Run one full training; deterministic per (config, seed).
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(cfg, |_| {})
}

/// Like [`train`], additionally handing each metrics line to `on_line` as
/// soon as it is produced (the CLI streams them to stdout).
pub fn train_with(cfg: &TrainConfig, mut on_line: impl FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_scenes = load_dataset(&cfg.train_data)?;
    let eval_scenes = if cfg.eval_interval > 0 {
        Some(load_dataset(&cfg.eval_data)?)
    } else {
        None
    };

    let (model, mut store) = build_model(cfg)?;
    // anchor matching depends only on the ground truth: do it once per scene
    let matches: Vec<MatchResult> = train_scenes
        .iter()
        .map(|s| match_anchors(&model.anchors, &s.gts(), POS_IOU_THR, NEG_IOU_THR))
        .collect::<scarfnet_core::Result<_>>()?;

    let mut sgd = Sgd::new(cfg.sgd.to_core())?;
    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut log = String::new();
    let mut final_map = None;

    for iter in 0..cfg.iterations {
        let lr = sgd.config().lr_at(iter);
        let batch: Vec<usize> = (0..cfg.sgd.batch_size)
            .map(|_| sampler.gen_range(0..train_scenes.len()))
            .collect();

        // batch items run on independent tapes; the reduction below is in
        // fixed batch order regardless of scheduling
        let items: Vec<Result<(BTreeMap<String, Vec<f32>>, f64, f64)>> = batch
            .par_iter()
            .map(|&idx| {
                let scene = &train_scenes[idx];
                let mut tape = Tape::new();
                let bound = store.bind(&mut tape);
                let (cls, reg) = model.forward_rows(&mut tape, &bound, &scene.image)?;
                let (loss, parts) =
                    detection_loss(&mut tape, &cls, &reg, &matches[idx], HARD_NEG_RATIO)?;
                let grads = tape.backward(&loss)?;
                let named = bound.named_grads(&grads)?;
                Ok((named, parts.cls, parts.reg))
            })
            .collect();

        let mut grad_sum: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut cls_sum = 0.0;
        let mut reg_sum = 0.0;
        for item in items {
            let (named, cls, reg) = item?;
            cls_sum += cls;
            reg_sum += reg;
            for (name, g) in named {
                match grad_sum.get_mut(&name) {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => {
                        grad_sum.insert(name, g);
                    }
                }
            }
        }
        let inv = 1.0 / cfg.sgd.batch_size as f32;
        for g in grad_sum.values_mut() {
            for v in g.iter_mut() {
                *v *= inv;
            }
        }
        let loss_cls = (cls_sum / cfg.sgd.batch_size as f64) as f32;
        let loss_reg = (reg_sum / cfg.sgd.batch_size as f64) as f32;
        if !loss_cls.is_finite() || !loss_reg.is_finite() {
            return Err(HarnessError::Diverged {
                iteration: iter,
                lr,
                loss_cls: loss_cls as f64,
                loss_reg: loss_reg as f64,
            });
        }

        sgd.step(&mut store, &grad_sum, iter)?;

        let map = match &eval_scenes {
            Some(scenes)
                if (iter + 1) % cfg.eval_interval == 0 || iter + 1 == cfg.iterations =>
            {
                let report = evaluate_scenes(&model, &store, scenes)?;
                final_map = Some(report.map);
                Some(report.map)
            }
            _ => None,
        };

        let line = MetricsLine { iter, lr, loss_cls, loss_reg, map };
        let rendered = serde_json::to_string(&line)?;
        on_line(&rendered);
        log.push_str(&rendered);
        log.push('\n');
    }

    let checkpoint = Checkpoint::from_store(&store, cfg, cfg.iterations);
    Ok(TrainOutcome { checkpoint, log, final_map })
}

/// Rebuild a model from a checkpoint's stored config and load its weights.
pub fn restore(ckpt: &Checkpoint) -> Result<(Model, ParamStore<f32>)> {
    let (model, mut store) = build_model(&ckpt.config)?;
    ckpt.apply(&mut store)?;
    Ok((model, store))
}

/// Mean losses of one batch-sized probe (used by tests for quick signal).
pub fn probe_loss(cfg: &TrainConfig, scenes: &[SceneSample]) -> Result<f64> {
    let (model, store) = build_model(cfg)?;
    let mut total = 0.0;
    for scene in scenes {
        let matches = match_anchors(&model.anchors, &scene.gts(), POS_IOU_THR, NEG_IOU_THR)?;
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let (cls, reg) = model.forward_rows(&mut tape, &bound, &scene.image)?;
        let (_, parts) = detection_loss(&mut tape, &cls, &reg, &matches, HARD_NEG_RATIO)?;
        total += parts.cls + parts.reg;
    }
    Ok(total / scenes.len() as f64)
}
