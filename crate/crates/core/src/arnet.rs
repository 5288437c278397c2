//! Attentive redistribution: concatenate the fused levels, gate channels
//! with a squeeze-excitation block, then resize back to each level and
//! combine with the original pyramid.

use std::str::FromStr;

use crate::backbone::{LevelLayout, PyramidFeatures};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// How redistributed semantics join the original feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CombineMode {
    ChannelConcat,
    ElementAdd,
}

impl FromStr for CombineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel-concat" | "concat" => Ok(Self::ChannelConcat),
            "element-add" | "add" => Ok(Self::ElementAdd),
            other => Err(Error::Argument(format!(
                "unknown combine mode '{other}' (expected channel-concat or element-add)"
            ))),
        }
    }
}

impl std::fmt::Display for CombineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ChannelConcat => "channel-concat",
            Self::ElementAdd => "element-add",
        })
    }
}

/// Squeeze-excitation: GAP -> fc -> relu -> fc -> sigmoid, producing one
/// weight per channel.
pub struct SeBlock {
    prefix: String,
    pub channels: usize,
    pub reduction: usize,
}

impl SeBlock {
    pub fn register<T: Scalar>(
        prefix: &str,
        channels: usize,
        reduction: usize,
        store: &mut ParamStore<T>,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "reduction {reduction} must divide channel count {channels}"
            )));
        }
        let hidden = channels / reduction;
        store.register(&format!("{prefix}.fc1.w"), &[hidden, channels], Init::KaimingUniform)?;
        store.register(&format!("{prefix}.fc1.b"), &[hidden], Init::Zeros)?;
        store.register(&format!("{prefix}.fc2.w"), &[channels, hidden], Init::KaimingUniform)?;
        store.register(&format!("{prefix}.fc2.b"), &[channels], Init::Zeros)?;
        Ok(Self { prefix: prefix.to_string(), channels, reduction })
    }

    /// Per-channel attention weights in (0,1) for `z = [C,H,W]`.
    pub fn attention<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound<T>,
        z: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if z.rank() != 3 || z.dims()[0] != self.channels {
            return Err(Error::Shape(format!(
                "attention expects [{},H,W], got {:?}",
                self.channels,
                z.dims()
            )));
        }
        let pooled = tape.global_avg_pool(z)?;
        let w1 = bound.get(&format!("{}.fc1.w", self.prefix))?;
        let b1 = bound.get(&format!("{}.fc1.b", self.prefix))?;
        let w2 = bound.get(&format!("{}.fc2.w", self.prefix))?;
        let b2 = bound.get(&format!("{}.fc2.b", self.prefix))?;
        let h = tape.fc(&pooled, w1, b1)?;
        let h = tape.relu(&h)?;
        let pre = tape.fc(&h, w2, b2)?;
        tape.sigmoid(&pre)
    }
}

/// The redistribution network.
pub struct ArNet {
    prefix: String,
    se: Option<SeBlock>,
    pub combine: CombineMode,
    fused_width: usize,
    out_channels: Vec<usize>,
    layouts: Vec<LevelLayout>,
}

impl ArNet {
    /// `fused_width` is the channel count of the concatenated fused stack
    /// (k * per-level fused channels). `d_out` overrides the per-level
    /// output width; by default it matches the pyramid's own channels,
    /// which is also what ElementAdd requires.
    pub fn register<T: Scalar>(
        prefix: &str,
        fused_width: usize,
        layouts: &[LevelLayout],
        combine: CombineMode,
        d_out: Option<usize>,
        attention: bool,
        reduction: usize,
        store: &mut ParamStore<T>,
    ) -> Result<Self> {
        let out_channels: Vec<usize> = layouts
            .iter()
            .map(|l| d_out.unwrap_or(l.channels))
            .collect();
        if combine == CombineMode::ElementAdd {
            for (l, layout) in layouts.iter().enumerate() {
                if out_channels[l] != layout.channels {
                    return Err(Error::Config(format!(
                        "element-add needs per-level output channels {} to match the pyramid, got {}",
                        layout.channels, out_channels[l]
                    )));
                }
            }
        }
        let se = if attention {
            Some(SeBlock::register(&format!("{prefix}.se"), fused_width, reduction, store)?)
        } else {
            None
        };
        for (l, &ch) in out_channels.iter().enumerate() {
            store.register(&format!("{prefix}.l{l}.w"), &[ch, fused_width, 1, 1], Init::KaimingUniform)?;
            store.register(&format!("{prefix}.l{l}.b"), &[ch], Init::Zeros)?;
        }
        Ok(Self {
            prefix: prefix.to_string(),
            se,
            combine,
            fused_width,
            out_channels,
            layouts: layouts.to_vec(),
        })
    }

    /// Output channels per level after combination.
    pub fn combined_channels(&self) -> Vec<usize> {
        self.layouts
            .iter()
            .zip(&self.out_channels)
            .map(|(l, &m)| match self.combine {
                CombineMode::ChannelConcat => l.channels + m,
                CombineMode::ElementAdd => l.channels,
            })
            .collect()
    }

    /// Redistribute fused semantics onto the pyramid.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound<T>,
        fused: &[Tensor<T>],
        pyramid: &PyramidFeatures<T>,
    ) -> Result<PyramidFeatures<T>> {
        if fused.len() != pyramid.k() {
            return Err(Error::Shape(format!(
                "fused stack has {} levels, pyramid has {}",
                fused.len(),
                pyramid.k()
            )));
        }
        let z = tape.concat_channels(fused)?;
        if z.dims()[0] != self.fused_width {
            return Err(Error::Shape(format!(
                "fused stack width {} != registered {}",
                z.dims()[0],
                self.fused_width
            )));
        }
        let gated = match &self.se {
            Some(se) => {
                let a = se.attention(tape, bound, &z)?;
                tape.hadamard(&z, &a)?
            }
            None => z,
        };
        let mut levels = Vec::with_capacity(pyramid.k());
        let mut layouts = Vec::with_capacity(pyramid.k());
        for (l, x) in pyramid.levels.iter().enumerate() {
            let (h, w) = (x.dims()[1], x.dims()[2]);
            let resized = if gated.dims()[1] == h && gated.dims()[2] == w {
                gated.clone()
            } else {
                tape.bilinear_resize(&gated, h, w)?
            };
            let cw = bound.get(&format!("{}.l{l}.w", self.prefix))?;
            let cb = bound.get(&format!("{}.l{l}.b", self.prefix))?;
            let m = tape.conv2d(&resized, cw, cb, 1, 0)?;
            let combined = match self.combine {
                CombineMode::ChannelConcat => tape.concat_channels(&[x.clone(), m])?,
                CombineMode::ElementAdd => tape.add(x, &m)?,
            };
            let mut layout = pyramid.layouts[l];
            layout.channels = combined.dims()[0];
            levels.push(combined);
            layouts.push(layout);
        }
        Ok(PyramidFeatures { levels, layouts })
    }
}
