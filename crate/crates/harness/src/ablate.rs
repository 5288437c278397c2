//! Ablation sweeps: train every fusion strategy (or a width/combine grid)
//! on identical data across seeds and tabulate mean +/- std mAP.

use rayon::prelude::*;
use serde::Serialize;

use scarfnet_core::{CombineMode, FusionKind};

use crate::config::TrainConfig;
use crate::error::Result;
use crate::evaluate::evaluate_checkpoint;
use crate::train::train;

/// One table row: a strategy (or grid cell) across seeds.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub seeds: u64,
}

fn stats(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Train one run and return its final mAP (from a full evaluation of the
/// held-out set).
pub fn run_cell(cfg: &TrainConfig) -> Result<f64> {
    let outcome = train(cfg)?;
    match outcome.final_map {
        Some(m) => Ok(m),
        None => Ok(evaluate_checkpoint(&outcome.checkpoint, &cfg.eval_data)?.map),
    }
}

/// Fusion-strategy sweep: all six kinds x seeds on identical data.
pub fn ablate_kinds(base: &TrainConfig, seeds: u64) -> Result<AblationTable> {
    let kinds = FusionKind::ALL;
    let cells: Vec<(usize, u64, TrainConfig)> = kinds
        .iter()
        .enumerate()
        .flat_map(|(row, &kind)| {
            (0..seeds).map(move |s| {
                let mut cfg = base.clone();
                cfg.fusion = kind;
                cfg.attention = true;
                cfg.seed = base.seed + s;
                (row, s, cfg)
            })
        })
        .collect();
    let results: Vec<Result<(usize, u64, f64)>> = cells
        .par_iter()
        .map(|(row, s, cfg)| Ok((*row, *s, run_cell(cfg)?)))
        .collect();
    let mut per_row: Vec<Vec<f64>> = vec![vec![0.0; seeds as usize]; kinds.len()];
    for r in results {
        let (row, s, map) = r?;
        per_row[row][s as usize] = map;
    }
    let rows = kinds
        .iter()
        .zip(per_row)
        .map(|(kind, per_seed)| {
            let (mean, std) = stats(&per_seed);
            AblationRow { label: kind.to_string(), per_seed, mean, std }
        })
        .collect();
    Ok(AblationTable { rows, seeds })
}

/// Width/combine grid on the full network: d in {16,32,64} x
/// {channel-concat, element-add}.
pub fn ablate_grid(base: &TrainConfig, seeds: u64) -> Result<AblationTable> {
    let dims = [16usize, 32, 64];
    let combines = [CombineMode::ChannelConcat, CombineMode::ElementAdd];
    let mut cells: Vec<(usize, u64, TrainConfig)> = Vec::new();
    let mut labels = Vec::new();
    for &d in &dims {
        for &combine in &combines {
            let row = labels.len();
            labels.push(format!("scarf-full d={d} {combine}"));
            for s in 0..seeds {
                let mut cfg = base.clone();
                cfg.fusion = FusionKind::ScarfFull;
                cfg.attention = true;
                cfg.d = d;
                cfg.combine = combine;
                cfg.seed = base.seed + s;
                cells.push((row, s, cfg));
            }
        }
    }
    let results: Vec<Result<(usize, u64, f64)>> = cells
        .par_iter()
        .map(|(row, s, cfg)| Ok((*row, *s, run_cell(cfg)?)))
        .collect();
    let mut per_row: Vec<Vec<f64>> = vec![vec![0.0; seeds as usize]; labels.len()];
    for r in results {
        let (row, s, map) = r?;
        per_row[row][s as usize] = map;
    }
    let rows = labels
        .into_iter()
        .zip(per_row)
        .map(|(label, per_seed)| {
            let (mean, std) = stats(&per_seed);
            AblationRow { label, per_seed, mean, std }
        })
        .collect();
    Ok(AblationTable { rows, seeds })
}

/// Plain-text rendering of the table.
pub fn format_table(table: &AblationTable) -> String {
    let mut out = String::new();
    let width = table.rows.iter().map(|r| r.label.len()).max().unwrap_or(8).max(8);
    out.push_str(&format!(
        "{:width$}  {:>8}  {:>8}  per-seed mAP@0.5\n",
        "fusion", "mean", "std",
    ));
    for row in &table.rows {
        let seeds = row
            .per_seed
            .iter()
            .map(|m| format!("{m:.4}"))
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&format!(
            "{:width$}  {:>8.4}  {:>8.4}  [{seeds}]\n",
            row.label, row.mean, row.std,
        ));
    }
    out
}
