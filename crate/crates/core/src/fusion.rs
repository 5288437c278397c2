//! Fusion strategies behind one interface: the full pipeline, its
//! no-attention variant, and the ablation comparators (plain pyramid,
//! 1x1-conv fusion, top-down lateral pathway, unidirectional sweep).
//!
//! Every kind maps a pyramid to a pyramid with unchanged spatial dims per
//! level; only the channel widths differ, and detection heads adapt to
//! them.

use std::str::FromStr;

use crate::arnet::{ArNet, CombineMode};
use crate::backbone::{LevelLayout, PyramidFeatures};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, ParamStore};
use crate::scalar::Scalar;
use crate::scnet::ScNet;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionKind {
    /// Identity: detect on the raw pyramid.
    Plain,
    /// Matched stack fused by a single 1x1 conv instead of the sweep.
    ConvFusion,
    /// Lateral 1x1 convs plus upsampled top-down connections.
    TopDown,
    /// Forward sweep only.
    UniLstm,
    /// Bidirectional sweep, attention gates pinned off.
    ScarfNoAttention,
    /// Bidirectional sweep plus channel attention.
    ScarfFull,
}

impl FusionKind {
    pub const ALL: [FusionKind; 6] = [
        FusionKind::Plain,
        FusionKind::ConvFusion,
        FusionKind::TopDown,
        FusionKind::UniLstm,
        FusionKind::ScarfNoAttention,
        FusionKind::ScarfFull,
    ];
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "conv-fusion" => Ok(Self::ConvFusion),
            "top-down" => Ok(Self::TopDown),
            "uni-lstm" => Ok(Self::UniLstm),
            "scarf-no-attention" => Ok(Self::ScarfNoAttention),
            "scarf-full" => Ok(Self::ScarfFull),
            other => Err(Error::Argument(format!(
                "unknown fusion kind '{other}' (expected plain, conv-fusion, top-down, \
                 uni-lstm, scarf-no-attention or scarf-full)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Plain => "plain",
            Self::ConvFusion => "conv-fusion",
            Self::TopDown => "top-down",
            Self::UniLstm => "uni-lstm",
            Self::ScarfNoAttention => "scarf-no-attention",
            Self::ScarfFull => "scarf-full",
        })
    }
}

/// Architecture knobs shared by all kinds.
#[derive(Clone, Debug)]
pub struct FusionConfig {
    pub kind: FusionKind,
    /// Matched channel width.
    pub d: usize,
    /// Per-level output width of the redistribution stage (None: match the
    /// pyramid's own channels).
    pub d_out: Option<usize>,
    pub combine: CombineMode,
    /// Channel attention in the redistribution stage of `ConvFusion`.
    /// The sweep kinds fix it by name (`ScarfFull` on, `ScarfNoAttention`
    /// off); `Plain` and `TopDown` have no attention stage at all.
    pub attention: bool,
    pub reduction: usize,
}

impl FusionConfig {
    pub fn new(kind: FusionKind) -> Self {
        Self {
            kind,
            d: 32,
            d_out: None,
            combine: CombineMode::ChannelConcat,
            attention: true,
            reduction: 4,
        }
    }
}

enum Pieces {
    Plain,
    ConvFusion { scnet: ScNet, arnet: ArNet, prefix: String },
    TopDown { prefix: String, out_channels: Vec<usize> },
    Sweep { scnet: ScNet, arnet: ArNet },
}

/// One fusion strategy with its registered parameters.
pub struct FusionNetwork {
    cfg: FusionConfig,
    layouts: Vec<LevelLayout>,
    pieces: Pieces,
}

impl FusionNetwork {
    pub fn register<T: Scalar>(
        cfg: &FusionConfig,
        layouts: &[LevelLayout],
        store: &mut ParamStore<T>,
        prefix: &str,
    ) -> Result<Self> {
        if layouts.len() < 2 {
            return Err(Error::Argument(format!(
                "fusion needs k >= 2 levels, got {}",
                layouts.len()
            )));
        }
        let k = layouts.len();
        let pieces = match cfg.kind {
            FusionKind::Plain => Pieces::Plain,
            FusionKind::TopDown => {
                let out_channels: Vec<usize> =
                    layouts.iter().map(|l| cfg.d_out.unwrap_or(l.channels)).collect();
                for (l, layout) in layouts.iter().enumerate() {
                    store.register(
                        &format!("{prefix}.lat{l}.w"),
                        &[out_channels[l], layout.channels, 1, 1],
                        Init::KaimingUniform,
                    )?;
                    store.register(&format!("{prefix}.lat{l}.b"), &[out_channels[l]], Init::Zeros)?;
                    if l + 1 < k {
                        store.register(
                            &format!("{prefix}.top{l}.w"),
                            &[out_channels[l], out_channels[l + 1], 1, 1],
                            Init::KaimingUniform,
                        )?;
                        store.register(&format!("{prefix}.top{l}.b"), &[out_channels[l]], Init::Zeros)?;
                    }
                }
                Pieces::TopDown { prefix: prefix.to_string(), out_channels }
            }
            FusionKind::ConvFusion => {
                // reuse the matching front end; the sweep is replaced by one
                // 1x1 conv over the concatenated matched stack
                let scnet = ScNet::register(&format!("{prefix}.sc"), layouts, cfg.d, false, store)?;
                let fused_per_level = 2 * cfg.d;
                store.register(
                    &format!("{prefix}.mix.w"),
                    &[k * fused_per_level, k * cfg.d, 1, 1],
                    Init::KaimingUniform,
                )?;
                store.register(&format!("{prefix}.mix.b"), &[k * fused_per_level], Init::Zeros)?;
                let arnet = ArNet::register(
                    &format!("{prefix}.ar"),
                    k * fused_per_level,
                    layouts,
                    cfg.combine,
                    cfg.d_out,
                    cfg.attention,
                    cfg.reduction,
                    store,
                )?;
                Pieces::ConvFusion { scnet, arnet, prefix: prefix.to_string() }
            }
            FusionKind::UniLstm | FusionKind::ScarfNoAttention | FusionKind::ScarfFull => {
                let bidirectional = cfg.kind != FusionKind::UniLstm;
                let attention = cfg.kind == FusionKind::ScarfFull;
                let scnet =
                    ScNet::register(&format!("{prefix}.sc"), layouts, cfg.d, bidirectional, store)?;
                let arnet = ArNet::register(
                    &format!("{prefix}.ar"),
                    k * scnet.fused_channels(),
                    layouts,
                    cfg.combine,
                    cfg.d_out,
                    attention,
                    cfg.reduction,
                    store,
                )?;
                Pieces::Sweep { scnet, arnet }
            }
        };
        Ok(Self { cfg: cfg.clone(), layouts: layouts.to_vec(), pieces })
    }

    pub fn kind(&self) -> FusionKind {
        self.cfg.kind
    }

    /// Channel widths the detection heads must accept.
    pub fn out_channels(&self) -> Vec<usize> {
        match &self.pieces {
            Pieces::Plain => self.layouts.iter().map(|l| l.channels).collect(),
            Pieces::TopDown { out_channels, .. } => out_channels.clone(),
            Pieces::ConvFusion { arnet, .. } | Pieces::Sweep { arnet, .. } => {
                arnet.combined_channels()
            }
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound<T>,
        pyramid: &PyramidFeatures<T>,
    ) -> Result<PyramidFeatures<T>> {
        if pyramid.k() != self.layouts.len() {
            return Err(Error::Shape(format!(
                "pyramid has {} levels, fusion registered for {}",
                pyramid.k(),
                self.layouts.len()
            )));
        }
        match &self.pieces {
            Pieces::Plain => Ok(pyramid.clone()),
            Pieces::TopDown { prefix, out_channels } => {
                self.topdown_forward(tape, bound, pyramid, prefix, out_channels)
            }
            Pieces::ConvFusion { scnet, arnet, prefix } => {
                let matched = scnet.match_levels(tape, bound, pyramid)?;
                let stack = tape.concat_channels(&matched)?;
                let w = bound.get(&format!("{prefix}.mix.w"))?;
                let b = bound.get(&format!("{prefix}.mix.b"))?;
                let mixed = tape.conv2d(&stack, w, b, 1, 0)?;
                let per = mixed.dims()[0] / pyramid.k();
                let fused: Vec<Tensor<T>> = (0..pyramid.k())
                    .map(|l| tape.slice_channels(&mixed, l * per, per))
                    .collect::<Result<_>>()?;
                arnet.forward(tape, bound, &fused, pyramid)
            }
            Pieces::Sweep { scnet, arnet } => {
                let fused = scnet.forward(tape, bound, pyramid)?;
                arnet.forward(tape, bound, &fused, pyramid)
            }
        }
    }

    fn topdown_forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound<T>,
        pyramid: &PyramidFeatures<T>,
        prefix: &str,
        out_channels: &[usize],
    ) -> Result<PyramidFeatures<T>> {
        let k = pyramid.k();
        for w in pyramid.layouts.windows(2) {
            if w[0].h != 2 * w[1].h || w[0].w != 2 * w[1].w {
                return Err(Error::Shape(format!(
                    "top-down pathway needs 2x level ratios, got {}x{} above {}x{}",
                    w[0].h, w[0].w, w[1].h, w[1].w
                )));
            }
        }
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; k];
        for l in (0..k).rev() {
            let lw = bound.get(&format!("{prefix}.lat{l}.w"))?;
            let lb = bound.get(&format!("{prefix}.lat{l}.b"))?;
            let lateral = tape.conv2d(&pyramid.levels[l], lw, lb, 1, 0)?;
            let combined = if l + 1 < k {
                let above = outputs[l + 1].as_ref().expect("filled top-down");
                let (h, w) = (pyramid.layouts[l].h, pyramid.layouts[l].w);
                let up = tape.bilinear_resize(above, h, w)?;
                let tw = bound.get(&format!("{prefix}.top{l}.w"))?;
                let tb = bound.get(&format!("{prefix}.top{l}.b"))?;
                let top = tape.conv2d(&up, tw, tb, 1, 0)?;
                tape.add(&lateral, &top)?
            } else {
                lateral
            };
            outputs[l] = Some(combined);
        }
        let levels: Vec<Tensor<T>> = outputs.into_iter().map(|o| o.expect("all filled")).collect();
        let layouts = pyramid
            .layouts
            .iter()
            .zip(out_channels)
            .map(|(l, &c)| LevelLayout { channels: c, ..*l })
            .collect();
        Ok(PyramidFeatures { levels, layouts })
    }
}
