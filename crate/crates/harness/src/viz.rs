//! Feature-map heatmaps: pick the channel with the highest spatial mean,
//! min-max normalize to [0,255], write a binary PGM at the map's native
//! resolution.

use std::path::Path;
use std::str::FromStr;

use scarfnet_core::{Tape, Tensor};

use crate::checkpoint::Checkpoint;
use crate::data::IMAGE_SIZE;
use crate::error::{HarnessError, Result};
use crate::pnm;
use crate::train::restore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Raw backbone feature X_l.
    Pyramid,
    /// Fused/redistributed feature X'_l.
    Scarf,
}

impl FromStr for Stage {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pyramid" => Ok(Self::Pyramid),
            "scarf" => Ok(Self::Scarf),
            other => Err(HarnessError::Config(format!(
                "unknown stage '{other}' (expected pyramid or scarf)"
            ))),
        }
    }
}

/// Index of the channel with the highest spatial mean activation.
pub fn select_channel(data: &[f32], channels: usize) -> usize {
    let plane = data.len() / channels;
    let mut best = 0usize;
    let mut best_mean = f64::NEG_INFINITY;
    for c in 0..channels {
        let mean: f64 = data[c * plane..(c + 1) * plane]
            .iter()
            .map(|&v| v as f64)
            .sum::<f64>()
            / plane as f64;
        if mean > best_mean {
            best_mean = mean;
            best = c;
        }
    }
    best
}

/// Min-max normalized grayscale of the selected channel; a constant map
/// renders mid-gray.
pub fn heatmap(feature: &Tensor<f32>) -> (usize, usize, Vec<u8>) {
    let (c, h, w) = (feature.dims()[0], feature.dims()[1], feature.dims()[2]);
    let plane = h * w;
    let ch = select_channel(feature.data(), c);
    let slab = &feature.data()[ch * plane..(ch + 1) * plane];
    let min = slab.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = slab.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let bytes = if max > min {
        slab.iter()
            .map(|&v| (((v - min) / (max - min)) * 255.0).round() as u8)
            .collect()
    } else {
        vec![128u8; plane]
    };
    (w, h, bytes)
}

/// Load an image file (P5 or P6) as a `[3,64,64]` tensor in [0,1].
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let (w, h, rgb) = pnm::read_pnm(path)?.to_rgb();
    if w != IMAGE_SIZE || h != IMAGE_SIZE {
        return Err(HarnessError::Dataset(format!(
            "image is {w}x{h}, expected {IMAGE_SIZE}x{IMAGE_SIZE}"
        )));
    }
    let n = IMAGE_SIZE;
    let mut data = vec![0f32; 3 * n * n];
    for p in 0..n * n {
        for c in 0..3 {
            data[c * n * n + p] = rgb[p * 3 + c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec([3, n, n], data).expect("consistent dims"))
}

/// Render the heatmap of one level at one stage to a PGM file.
pub fn visualize(
    ckpt: &Checkpoint,
    image_path: &Path,
    level: usize,
    stage: Stage,
    out: &Path,
) -> Result<()> {
    let (model, store) = restore(ckpt)?;
    let image = load_image(image_path)?;
    let mut tape = Tape::new();
    let bound = store.snapshot();
    let (pyramid, fused) = model.forward_pyramids(&mut tape, &bound, &image)?;
    let features = match stage {
        Stage::Pyramid => &pyramid,
        Stage::Scarf => &fused,
    };
    if level >= features.levels.len() {
        return Err(HarnessError::Config(format!(
            "level {level} out of range (pyramid has {})",
            features.levels.len()
        )));
    }
    let (w, h, bytes) = heatmap(&features.levels[level]);
    pnm::write_pgm(out, w, h, &bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_renders_mid_gray() {
        let t = Tensor::<f32>::filled([2, 3, 3], 4.0);
        let (w, h, bytes) = heatmap(&t);
        assert_eq!((w, h), (3, 3));
        assert!(bytes.iter().all(|&b| b == 128));
    }

    #[test]
    fn single_hot_feature_is_single_white_pixel() {
        let mut data = vec![0f32; 2 * 9];
        data[9 + 4] = 5.0; // channel 1 has the higher mean
        let t = Tensor::from_vec([2, 3, 3], data).unwrap();
        let (_, _, bytes) = heatmap(&t);
        assert_eq!(bytes[4], 255);
        assert_eq!(bytes.iter().filter(|&&b| b == 255).count(), 1);
        assert_eq!(bytes.iter().filter(|&&b| b == 0).count(), 8);
    }

    #[test]
    fn channel_selection_matches_argmax_of_means_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let c = rng.gen_range(2..6);
            let plane = 16;
            let data: Vec<f32> = (0..c * plane).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let got = select_channel(&data, c);
            // brute-force oracle
            let mut means = vec![0f64; c];
            for (i, &v) in data.iter().enumerate() {
                means[i / plane] += v as f64 / plane as f64;
            }
            let want = means
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(got, want);
        }
    }

    #[test]
    fn heatmap_invariant_to_positive_per_channel_rescale() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let (c, plane) = (4, 9);
        // positive activations so per-channel scaling keeps the argmax
        let data: Vec<f32> = (0..c * plane).map(|_| rng.gen_range(0.1..2.0)).collect();
        let t = Tensor::from_vec([c, 3, 3], data.clone()).unwrap();
        let base = heatmap(&t);
        let hot = select_channel(&data, c);
        // power-of-two scales: exact in binary fp, so normalization is
        // bit-identical; grow the winner, shrink the rest
        let mut scaled = data.clone();
        for ch in 0..c {
            let s = if ch == hot { 2.0 } else { 0.25 };
            for v in &mut scaled[ch * plane..(ch + 1) * plane] {
                *v *= s;
            }
        }
        let t2 = Tensor::from_vec([c, 3, 3], scaled.clone()).unwrap();
        assert_eq!(select_channel(&scaled, c), hot);
        let again = heatmap(&t2);
        assert_eq!(base.2, again.2);
    }
}
