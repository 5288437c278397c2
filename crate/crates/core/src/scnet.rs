//! Semantic combining network: matching blocks plus a bidirectional
//! ConvLSTM sweep across pyramid levels.
//!
//! The matching block bilinearly resizes every level to the largest level's
//! spatial size and projects it to a common width `d` with a 1x1 conv. The
//! cell keeps its gates cheap: input/forget/output gates are per-channel
//! vectors computed from globally average-pooled features through paired
//! d x d maps, while the candidate state uses full 3x3 convolutions. The
//! cell state update is `C = f o C_prev + i o G` and the emitted feature is
//! `o o tanh(C)`. One cell is shared across all levels per direction, so
//! the cell parameter count does not depend on k.

use crate::backbone::{LevelLayout, PyramidFeatures};
use crate::error::{Error, Result};
use crate::nn::{Bound, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Resize-and-project front end: one 1x1 conv per level onto `d` channels
/// at a common spatial size.
pub struct MatchingBlock {
    prefix: String,
    level_channels: Vec<usize>,
    pub target_hw: (usize, usize),
    pub d: usize,
}

impl MatchingBlock {
    pub fn register<T: Scalar>(
        prefix: &str,
        layouts: &[LevelLayout],
        d: usize,
        store: &mut ParamStore<T>,
    ) -> Result<Self> {
        if layouts.is_empty() {
            return Err(Error::Argument("matching block needs at least one level".into()));
        }
        for (l, layout) in layouts.iter().enumerate() {
            store.register(&format!("{prefix}.l{l}.w"), &[d, layout.channels, 1, 1], Init::KaimingUniform)?;
            store.register(&format!("{prefix}.l{l}.b"), &[d], Init::Zeros)?;
        }
        Ok(Self {
            prefix: prefix.to_string(),
            level_channels: layouts.iter().map(|l| l.channels).collect(),
            target_hw: (layouts[0].h, layouts[0].w),
            d,
        })
    }

    /// Resize level `level` to the target size, then project to d channels.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound<T>,
        x: &Tensor<T>,
        level: usize,
    ) -> Result<Tensor<T>> {
        if level >= self.level_channels.len() {
            return Err(Error::Argument(format!(
                "level {level} not registered (matching block has {})",
                self.level_channels.len()
            )));
        }
        if x.dims()[0] != self.level_channels[level] {
            return Err(Error::Shape(format!(
                "level {level} expects {} channels, got {}",
                self.level_channels[level],
                x.dims()[0]
            )));
        }
        let (th, tw) = self.target_hw;
        let resized = if x.dims()[1] == th && x.dims()[2] == tw {
            x.clone()
        } else {
            tape.bilinear_resize(x, th, tw)?
        };
        let w = bound.get(&format!("{}.l{level}.w", self.prefix))?;
        let b = bound.get(&format!("{}.l{level}.b", self.prefix))?;
        tape.conv2d(&resized, w, b, 1, 0)
    }
}

/// Weights of one sweep direction.
pub struct ConvLstmCell {
    prefix: String,
    pub d: usize,
}

/// Running state of a sweep: cell state and previous emitted feature.
#[derive(Clone)]
pub struct LstmState<T> {
    pub c: Tensor<T>,
    pub h: Tensor<T>,
}

impl<T: Scalar> LstmState<T> {
    /// Zero initial state at the sweep's working size.
    pub fn zeros(d: usize, h: usize, w: usize) -> Self {
        Self {
            c: Tensor::zeros([d, h, w]),
            h: Tensor::zeros([d, h, w]),
        }
    }
}

impl ConvLstmCell {
    /// Gate maps are paired per gate (one for the pooled input, one for the
    /// pooled previous feature); forget bias starts at 1 so early sweeps
    /// carry state.
    pub fn register<T: Scalar>(prefix: &str, d: usize, store: &mut ParamStore<T>) -> Result<Self> {
        for gate in ["i", "f", "o"] {
            store.register(&format!("{prefix}.w_x{gate}"), &[d, d], Init::KaimingUniform)?;
            store.register(&format!("{prefix}.w_h{gate}"), &[d, d], Init::KaimingUniform)?;
        }
        store.register(&format!("{prefix}.b_i"), &[d], Init::Zeros)?;
        store.register(&format!("{prefix}.b_f"), &[d], Init::Constant(1.0))?;
        store.register(&format!("{prefix}.b_o"), &[d], Init::Zeros)?;
        store.register(&format!("{prefix}.w_xg"), &[d, d, 3, 3], Init::KaimingUniform)?;
        store.register(&format!("{prefix}.w_hg"), &[d, d, 3, 3], Init::KaimingUniform)?;
        store.register(&format!("{prefix}.b_g"), &[d], Init::Zeros)?;
        Ok(Self { prefix: prefix.to_string(), d })
    }

    /// Scalar parameter count of one cell: 6 d² gate maps + 3 d gate biases
    /// + two 3x3 d->d candidate convs + candidate bias.
    pub fn param_count(d: usize) -> usize {
        6 * d * d + 3 * d + 2 * (d * d * 9) + d
    }

    fn gate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound<T>,
        gate: &str,
        x_pooled: &Tensor<T>,
        h_pooled: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let wx = bound.get(&format!("{}.w_x{gate}", self.prefix))?;
        let wh = bound.get(&format!("{}.w_h{gate}", self.prefix))?;
        let b = bound.get(&format!("{}.b_{gate}", self.prefix))?;
        let zero = Tensor::zeros([self.d]);
        let tx = tape.fc(x_pooled, wx, b)?;
        let th = tape.fc(h_pooled, wh, &zero)?;
        let pre = tape.add(&tx, &th)?;
        tape.sigmoid(&pre)
    }

    /// One sweep step on a matched feature map.
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound<T>,
        x: &Tensor<T>,
        prev: &LstmState<T>,
    ) -> Result<LstmState<T>> {
        if x.rank() != 3 || x.dims()[0] != self.d {
            return Err(Error::Shape(format!(
                "lstm step expects [{},H,W], got {:?}",
                self.d,
                x.dims()
            )));
        }
        if prev.c.dims() != x.dims() || prev.h.dims() != x.dims() {
            return Err(Error::Shape(format!(
                "lstm state dims {:?}/{:?} do not match input {:?}",
                prev.c.dims(),
                prev.h.dims(),
                x.dims()
            )));
        }
        let x_pooled = tape.global_avg_pool(x)?;
        let h_pooled = tape.global_avg_pool(&prev.h)?;

        let i = self.gate(tape, bound, "i", &x_pooled, &h_pooled)?;
        let f = self.gate(tape, bound, "f", &x_pooled, &h_pooled)?;
        let o = self.gate(tape, bound, "o", &x_pooled, &h_pooled)?;

        let wxg = bound.get(&format!("{}.w_xg", self.prefix))?;
        let whg = bound.get(&format!("{}.w_hg", self.prefix))?;
        let bg = bound.get(&format!("{}.b_g", self.prefix))?;
        let zero_bias = Tensor::zeros([self.d]);
        let gx = tape.conv2d(x, wxg, bg, 1, 1)?;
        let gh = tape.conv2d(&prev.h, whg, &zero_bias, 1, 1)?;
        let g_pre = tape.add(&gx, &gh)?;
        let g = tape.tanh(&g_pre)?;

        let keep = tape.hadamard(&prev.c, &f)?;
        let write = tape.hadamard(&g, &i)?;
        let c = tape.add(&keep, &write)?;
        let c_act = tape.tanh(&c)?;
        let h = tape.hadamard(&c_act, &o)?;
        Ok(LstmState { c, h })
    }
}

/// Run one direction over already-matched inputs from a zero state,
/// returning the emitted feature per step (in input order).
pub fn sweep<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound<T>,
    cell: &ConvLstmCell,
    inputs: &[Tensor<T>],
) -> Result<Vec<Tensor<T>>> {
    let (h, w) = (inputs[0].dims()[1], inputs[0].dims()[2]);
    let mut state = LstmState::zeros(cell.d, h, w);
    let mut out = Vec::with_capacity(inputs.len());
    for x in inputs {
        state = cell.step(tape, bound, x, &state)?;
        out.push(state.h.clone());
    }
    Ok(out)
}

/// Bidirectional sweep over matched inputs: per level the forward hidden
/// state concatenated with the backward one, `[2d,H,W]`.
pub fn sweep_bidirectional<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound<T>,
    forward: &ConvLstmCell,
    backward: &ConvLstmCell,
    inputs: &[Tensor<T>],
) -> Result<Vec<Tensor<T>>> {
    let fwd = sweep(tape, bound, forward, inputs)?;
    let rev_inputs: Vec<Tensor<T>> = inputs.iter().rev().cloned().collect();
    let mut bwd = sweep(tape, bound, backward, &rev_inputs)?;
    bwd.reverse();
    fwd.iter()
        .zip(&bwd)
        .map(|(f, b)| tape.concat_channels(&[f.clone(), b.clone()]))
        .collect()
}

/// Matching blocks plus the (bi)directional sweep.
pub struct ScNet {
    pub matching: MatchingBlock,
    forward_cell: ConvLstmCell,
    backward_cell: Option<ConvLstmCell>,
}

impl ScNet {
    pub fn register<T: Scalar>(
        prefix: &str,
        layouts: &[LevelLayout],
        d: usize,
        bidirectional: bool,
        store: &mut ParamStore<T>,
    ) -> Result<Self> {
        if layouts.len() < 2 {
            return Err(Error::Argument(format!(
                "semantic combining needs k >= 2 levels, got {}",
                layouts.len()
            )));
        }
        let matching = MatchingBlock::register(&format!("{prefix}.match"), layouts, d, store)?;
        let forward_cell = ConvLstmCell::register(&format!("{prefix}.fwd"), d, store)?;
        let backward_cell = if bidirectional {
            Some(ConvLstmCell::register(&format!("{prefix}.bwd"), d, store)?)
        } else {
            None
        };
        Ok(Self { matching, forward_cell, backward_cell })
    }

    /// Channels of each fused level: 2d bidirectional, d otherwise.
    pub fn fused_channels(&self) -> usize {
        if self.backward_cell.is_some() {
            2 * self.matching.d
        } else {
            self.matching.d
        }
    }

    /// Match all levels to a common size/width.
    pub fn match_levels<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound<T>,
        pyramid: &PyramidFeatures<T>,
    ) -> Result<Vec<Tensor<T>>> {
        pyramid
            .levels
            .iter()
            .enumerate()
            .map(|(l, x)| self.matching.forward(tape, bound, x, l))
            .collect()
    }

    /// Fused per-level features at the largest level's resolution.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound<T>,
        pyramid: &PyramidFeatures<T>,
    ) -> Result<Vec<Tensor<T>>> {
        if pyramid.k() < 2 {
            return Err(Error::Argument(format!(
                "semantic combining needs k >= 2 levels, got {}",
                pyramid.k()
            )));
        }
        let matched = self.match_levels(tape, bound, pyramid)?;
        match &self.backward_cell {
            Some(bwd) => sweep_bidirectional(tape, bound, &self.forward_cell, bwd, &matched),
            None => sweep(tape, bound, &self.forward_cell, &matched),
        }
    }
}
