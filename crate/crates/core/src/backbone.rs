//! Bottom-up CNN producing a multiscale feature pyramid.
//!
//! Each stage halves the spatial size: 3x3 conv stride 2 -> relu ->
//! 3x3 conv stride 1 -> relu. Detection reads the last `k` stages.

use crate::error::{Error, Result};
use crate::nn::{Bound, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Static description of the pyramid: stage widths, how many of the deepest
/// stages feed detection, and the input resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidSpec {
    pub input_hw: (usize, usize),
    /// Output channels of every stage, shallow to deep.
    pub stage_channels: Vec<usize>,
    /// Number of deepest stages used as detection levels (k >= 2).
    pub k: usize,
}

/// Shape metadata of one detection level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelLayout {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl PyramidSpec {
    /// Minutes-scale default: 64x64 input, five stages, detection on the
    /// deepest three (strides 8, 16, 32 with channels 32, 64, 128).
    pub fn desk_default() -> Self {
        Self {
            input_hw: (64, 64),
            stage_channels: vec![8, 16, 32, 64, 128],
            k: 3,
        }
    }

    /// Same stage stack with a different number of detection levels.
    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn max_stride(&self) -> usize {
        1 << self.num_stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Argument(format!("k must be >= 2, got {}", self.k)));
        }
        if self.k > self.num_stages() {
            return Err(Error::Config(format!(
                "k={} exceeds {} stages",
                self.k,
                self.num_stages()
            )));
        }
        let ms = self.max_stride();
        let (h, w) = self.input_hw;
        if h % ms != 0 || w % ms != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} not divisible by max stride {ms}"
            )));
        }
        Ok(())
    }

    /// Layouts of the k detection levels, largest (shallowest) first.
    pub fn level_layouts(&self) -> Vec<LevelLayout> {
        let n = self.num_stages();
        let (h0, w0) = self.input_hw;
        (n - self.k..n)
            .map(|stage| {
                let stride = 1 << (stage + 1);
                LevelLayout {
                    channels: self.stage_channels[stage],
                    h: h0 / stride,
                    w: w0 / stride,
                    stride,
                }
            })
            .collect()
    }
}

/// Ordered multiscale feature maps, largest level first, with their layouts.
#[derive(Clone)]
pub struct PyramidFeatures<T> {
    pub levels: Vec<Tensor<T>>,
    pub layouts: Vec<LevelLayout>,
}

impl<T: Scalar> PyramidFeatures<T> {
    pub fn k(&self) -> usize {
        self.levels.len()
    }
}

/// The bottom-up stage stack.
pub struct Backbone {
    spec: PyramidSpec,
    prefix: String,
}

impl Backbone {
    /// Register all stage parameters under `prefix`.
    pub fn register<T: Scalar>(
        prefix: &str,
        spec: &PyramidSpec,
        store: &mut ParamStore<T>,
    ) -> Result<Self> {
        spec.validate()?;
        let mut in_ch = 3usize;
        for (i, &ch) in spec.stage_channels.iter().enumerate() {
            store.register(&stage_name(prefix, i, "c1.w"), &[ch, in_ch, 3, 3], Init::KaimingUniform)?;
            store.register(&stage_name(prefix, i, "c1.b"), &[ch], Init::Zeros)?;
            store.register(&stage_name(prefix, i, "c2.w"), &[ch, ch, 3, 3], Init::KaimingUniform)?;
            store.register(&stage_name(prefix, i, "c2.b"), &[ch], Init::Zeros)?;
            in_ch = ch;
        }
        Ok(Self { spec: spec.clone(), prefix: prefix.to_string() })
    }

    pub fn spec(&self) -> &PyramidSpec {
        &self.spec
    }

    /// Run the stack and return the deepest k stage outputs.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound<T>,
        image: &Tensor<T>,
    ) -> Result<PyramidFeatures<T>> {
        let (h0, w0) = self.spec.input_hw;
        if image.dims() != [3, h0, w0] {
            return Err(Error::Shape(format!(
                "backbone expects [3,{h0},{w0}], got {:?}",
                image.dims()
            )));
        }
        let n = self.spec.num_stages();
        let mut x = image.clone();
        let mut levels = Vec::with_capacity(self.spec.k);
        for i in 0..n {
            let w1 = bound.get(&stage_name(&self.prefix, i, "c1.w"))?;
            let b1 = bound.get(&stage_name(&self.prefix, i, "c1.b"))?;
            let w2 = bound.get(&stage_name(&self.prefix, i, "c2.w"))?;
            let b2 = bound.get(&stage_name(&self.prefix, i, "c2.b"))?;
            let y = tape.conv2d(&x, w1, b1, 2, 1)?;
            let y = tape.relu(&y)?;
            let y = tape.conv2d(&y, w2, b2, 1, 1)?;
            x = tape.relu(&y)?;
            if i >= n - self.spec.k {
                levels.push(x.clone());
            }
        }
        Ok(PyramidFeatures { levels, layouts: self.spec.level_layouts() })
    }
}

fn stage_name(prefix: &str, stage: usize, leaf: &str) -> String {
    format!("{prefix}.s{stage}.{leaf}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_spec_shapes() {
        let spec = PyramidSpec::desk_default();
        spec.validate().unwrap();
        let layouts = spec.level_layouts();
        assert_eq!(layouts.len(), 3);
        assert_eq!(
            layouts.iter().map(|l| (l.h, l.w)).collect::<Vec<_>>(),
            vec![(8, 8), (4, 4), (2, 2)]
        );
        assert_eq!(layouts.iter().map(|l| l.stride).collect::<Vec<_>>(), vec![8, 16, 32]);
        assert_eq!(layouts.iter().map(|l| l.channels).collect::<Vec<_>>(), vec![32, 64, 128]);
    }

    #[test]
    fn strides_strictly_increase() {
        // stride bookkeeping stands in for receptive-field growth
        for k in 2..=5 {
            let spec = PyramidSpec::desk_default().with_k(k);
            let layouts = spec.level_layouts();
            for w in layouts.windows(2) {
                assert_eq!(w[1].stride, 2 * w[0].stride);
                assert!(w[1].h < w[0].h && w[1].w < w[0].w);
            }
        }
    }

    #[test]
    fn indivisible_input_is_error() {
        let spec = PyramidSpec {
            input_hw: (60, 64),
            stage_channels: vec![8, 16, 32, 64, 128],
            k: 3,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn forward_shapes_and_zero_image() {
        let spec = PyramidSpec::desk_default();
        let mut store = ParamStore::<f32>::new(11);
        let bb = Backbone::register("backbone", &spec, &mut store).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let img = Tensor::zeros([3, 64, 64]);
        let pyr = bb.forward(&mut tape, &bound, &img).unwrap();
        assert_eq!(pyr.levels.len(), 3);
        assert_eq!(pyr.levels[0].dims(), &[32, 8, 8]);
        assert_eq!(pyr.levels[1].dims(), &[64, 4, 4]);
        assert_eq!(pyr.levels[2].dims(), &[128, 2, 2]);
        // zero image + zero biases stays zero through convs and relus
        for lvl in &pyr.levels {
            assert!(lvl.data().iter().all(|&v| v == 0.0));
        }
    }
}
