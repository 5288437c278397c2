//! Training configuration: JSON on disk, strict about unknown keys.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use scarfnet_core::{CombineMode, FusionConfig, FusionKind, SgdConfig};

use crate::error::{HarnessError, Result};

fn serialize_as_string<S: Serializer, T: ToString>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&v.to_string())
}

fn deserialize_fusion<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<FusionKind, D::Error> {
    let s = String::deserialize(d)?;
    FusionKind::from_str(&s).map_err(serde::de::Error::custom)
}

fn deserialize_combine<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<CombineMode, D::Error> {
    let s = String::deserialize(d)?;
    CombineMode::from_str(&s).map_err(serde::de::Error::custom)
}

/// Optimizer settings as stored in config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdSettings {
    /// `[iteration_bound, lr]` pairs with strictly increasing bounds.
    pub lr_schedule: Vec<(u64, f32)>,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
}

impl Default for SgdSettings {
    fn default() -> Self {
        Self {
            lr_schedule: scarfnet_core::default_schedule(TrainConfig::DEFAULT_ITERATIONS),
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 8,
        }
    }
}

impl SgdSettings {
    pub fn to_core(&self) -> SgdConfig<f32> {
        SgdConfig {
            schedule: self.lr_schedule.clone(),
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
        }
    }
}

/// Everything one training run needs. Unknown JSON keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    #[serde(serialize_with = "serialize_as_string", deserialize_with = "deserialize_fusion")]
    pub fusion: FusionKind,
    /// Detection levels (deepest stages of the backbone).
    pub k: usize,
    /// Matched channel width of the fusion stages.
    pub d: usize,
    /// Per-level redistribution output width; null matches the pyramid.
    pub d_out: Option<usize>,
    #[serde(serialize_with = "serialize_as_string", deserialize_with = "deserialize_combine")]
    pub combine: CombineMode,
    pub attention: bool,
    pub reduction: usize,
    pub sgd: SgdSettings,
    pub iterations: u64,
    pub seed: u64,
    pub train_data: PathBuf,
    pub eval_data: PathBuf,
    /// Evaluate mAP every this many iterations (0 disables evaluation).
    pub eval_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            fusion: FusionKind::ScarfFull,
            k: 3,
            d: 32,
            d_out: None,
            combine: CombineMode::ChannelConcat,
            attention: true,
            reduction: 4,
            sgd: SgdSettings::default(),
            iterations: Self::DEFAULT_ITERATIONS,
            seed: 0,
            train_data: PathBuf::from("data/train"),
            eval_data: PathBuf::from("data/eval"),
            eval_interval: 500,
        }
    }
}

impl TrainConfig {
    pub const DEFAULT_ITERATIONS: u64 = 2000;

    /// Change the iteration budget and rebuild the default-shaped schedule
    /// (60/30/10 split) to match.
    pub fn with_iterations(mut self, iterations: u64) -> Self {
        self.iterations = iterations;
        self.sgd.lr_schedule = scarfnet_core::default_schedule(iterations);
        self
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.k) {
            return Err(HarnessError::Config(format!("k must be in 2..=5, got {}", self.k)));
        }
        if self.d == 0 {
            return Err(HarnessError::Config("d must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(HarnessError::Config("iterations must be >= 1".into()));
        }
        if self.sgd.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be >= 1".into()));
        }
        self.sgd.to_core().validate().map_err(HarnessError::Core)?;
        Ok(())
    }

    /// The architecture half of this config. `attention: false` on the full
    /// network selects its attention-free variant.
    pub fn fusion_config(&self) -> FusionConfig {
        let kind = if self.fusion == FusionKind::ScarfFull && !self.attention {
            FusionKind::ScarfNoAttention
        } else {
            self.fusion
        };
        FusionConfig {
            kind,
            d: self.d,
            d_out: self.d_out,
            combine: self.combine,
            attention: self.attention,
            reduction: self.reduction,
        }
    }
}
