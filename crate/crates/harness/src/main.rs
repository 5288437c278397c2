use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use scarfnet::ablate::{ablate_grid, ablate_kinds, format_table};
use scarfnet::checkpoint::Checkpoint;
use scarfnet::config::TrainConfig;
use scarfnet::data::{generate_dataset, Difficulty};
use scarfnet::evaluate::evaluate_checkpoint;
use scarfnet::train::train_with;
use scarfnet::viz::{visualize, Stage};
use scarfnet_core::{CombineMode, FusionKind};

#[derive(Parser)]
#[command(name = "scarfnet", about = "Multiscale feature-fusion detection benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    GenData(GenDataArgs),
    /// Train a detector; prints one metrics JSON object per iteration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset (mAP@0.5).
    Eval(EvalArgs),
    /// Train all fusion strategies across seeds and tabulate mAP.
    Ablate(AblateArgs),
    /// Write a feature-map heatmap as a PGM image.
    Viz(VizArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "easy")]
    difficulty: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the config's fusion kind.
    #[arg(long)]
    fusion: Option<String>,
    /// Override the matched channel width d.
    #[arg(long)]
    channels: Option<usize>,
    /// Override the combine mode (channel-concat | element-add).
    #[arg(long)]
    combine: Option<String>,
    /// Override channel attention (on | off).
    #[arg(long)]
    attention: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
    /// Sweep channel width x combine mode instead of fusion kinds.
    #[arg(long, default_value_t = false)]
    grid: bool,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    level: usize,
    #[arg(long)]
    stage: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::GenData(args) => {
            let difficulty = Difficulty::from_str(&args.difficulty)?;
            generate_dataset(&args.out, args.count, args.seed, difficulty)?;
            println!(
                "wrote {} {} scenes to {}",
                args.count,
                difficulty,
                args.out.display()
            );
        }
        Command::Train(args) => {
            let mut cfg = TrainConfig::load(&args.config)
                .with_context(|| format!("loading {}", args.config.display()))?;
            if let Some(f) = args.fusion {
                cfg.fusion = FusionKind::from_str(&f)?;
            }
            if let Some(d) = args.channels {
                cfg.d = d;
            }
            if let Some(c) = args.combine {
                cfg.combine = CombineMode::from_str(&c)?;
            }
            if let Some(a) = args.attention {
                cfg.attention = match a.as_str() {
                    "on" => true,
                    "off" => false,
                    other => bail!("--attention expects on or off, got '{other}'"),
                };
            }
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            let outcome = train_with(&cfg, |line| println!("{line}"))?;
            outcome.checkpoint.save(&args.out)?;
            eprintln!("checkpoint saved to {}", args.out.display());
            if let Some(map) = outcome.final_map {
                eprintln!("final mAP@0.5: {map:.4}");
            }
        }
        Command::Eval(args) => {
            let ckpt = Checkpoint::load(&args.ckpt)?;
            let report = evaluate_checkpoint(&ckpt, &args.data)?;
            std::fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
            println!("mAP@0.5 over {} images: {:.4}", report.images, report.map);
            for (name, ap) in &report.per_class {
                match ap {
                    Some(v) => println!("  {name}: {v:.4}"),
                    None => println!("  {name}: (no instances)"),
                }
            }
        }
        Command::Ablate(args) => {
            let cfg = TrainConfig::load(&args.config)?;
            let table = if args.grid {
                ablate_grid(&cfg, args.seeds)?
            } else {
                ablate_kinds(&cfg, args.seeds)?
            };
            std::fs::write(&args.out, serde_json::to_string_pretty(&table)?)?;
            print!("{}", format_table(&table));
        }
        Command::Viz(args) => {
            let ckpt = Checkpoint::load(&args.ckpt)?;
            let stage = Stage::from_str(&args.stage)?;
            visualize(&ckpt, &args.image, args.level, stage, &args.out)?;
            println!("heatmap written to {}", args.out.display());
        }
    }
    Ok(())
}
