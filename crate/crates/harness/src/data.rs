//! Procedural scene generation and the on-disk dataset format.
//!
//! Scenes are 64x64 RGB images with 1-4 colored shapes (square, circle,
//! triangle) over a noisy background. Shapes are rasterized with 4x4
//! subpixel coverage; noise is Gaussian with sigma 0.05. Everything is
//! deterministic per (seed, difficulty).
//!
//! On disk: `scene_NNNNN.ppm` plus a JSON sidecar with the ground truth.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use scarfnet_core::detector::{iou, BoxPx, GtBox};
use scarfnet_core::Tensor;

use crate::error::{HarnessError, Result};
use crate::pnm;

pub const IMAGE_SIZE: usize = 64;
pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["square", "circle", "triangle"];

/// Object size ranges in pixels.
pub const EASY_SIZE: (f64, f64) = (16.0, 32.0);
pub const HARD_SMALL_SIZE: (f64, f64) = (6.0, 12.0);
pub const HARD_LARGE_SIZE: (f64, f64) = (16.0, 32.0);

const SUPERSAMPLE: usize = 4;
const NOISE_SIGMA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Difficulty {
    /// 1-2 large objects.
    Easy,
    /// 2-4 objects, at least one small.
    Hard,
}

impl FromStr for Difficulty {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Self::Easy),
            "hard" => Ok(Self::Hard),
            other => Err(HarnessError::Config(format!(
                "unknown difficulty '{other}' (expected easy or hard)"
            ))),
        }
    }
}

impl std::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Easy => "easy",
            Self::Hard => "hard",
        })
    }
}

/// Ground-truth object in a scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    /// `[x1, y1, x2, y2]` in pixels.
    pub bbox: [f64; 4],
}

/// One rendered scene with its ground truth.
#[derive(Clone)]
pub struct SceneSample {
    /// `[3, 64, 64]` with values in [0,1].
    pub image: Tensor<f32>,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl SceneSample {
    pub fn gts(&self) -> Vec<GtBox> {
        self.objects
            .iter()
            .map(|o| GtBox {
                class: o.class,
                rect: BoxPx::new(o.bbox[0], o.bbox[1], o.bbox[2], o.bbox[3]),
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    seed: u64,
    objects: Vec<SceneObject>,
}

struct Shape {
    class: usize,
    cx: f64,
    cy: f64,
    size: f64,
    color: [f64; 3],
}

impl Shape {
    fn bbox(&self) -> BoxPx {
        let r = 0.5 * self.size;
        BoxPx::new(self.cx - r, self.cy - r, self.cx + r, self.cy + r)
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        let dx = px - self.cx;
        let dy = py - self.cy;
        let r = 0.5 * self.size;
        match self.class {
            0 => dx.abs() <= r && dy.abs() <= r,
            1 => dx * dx + dy * dy <= r * r,
            _ => {
                // triangle with apex up: vertices (cx, cy-r), (cx-r, cy+r), (cx+r, cy+r)
                if dy < -r || dy > r {
                    return false;
                }
                // width grows linearly from 0 at the apex to 2r at the base
                let half_width = (dy + r) * 0.5;
                dx.abs() <= half_width
            }
        }
    }
}

const CLASS_COLORS: [[f64; 3]; 3] = [
    [0.85, 0.25, 0.25],
    [0.25, 0.80, 0.30],
    [0.25, 0.35, 0.90],
];

/// Deterministic scene from a seed.
pub fn gen_scene(seed: u64, difficulty: Difficulty) -> SceneSample {
    let stream = seed ^ match difficulty {
        Difficulty::Easy => 0x45a5_7e11,
        Difficulty::Hard => 0x8a2d_71f3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let n = IMAGE_SIZE;

    // noisy background
    let base: [f64; 3] = [
        rng.gen_range(0.30..0.60),
        rng.gen_range(0.30..0.60),
        rng.gen_range(0.30..0.60),
    ];
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut img = vec![0f32; 3 * n * n];
    for c in 0..3 {
        for p in 0..n * n {
            img[c * n * n + p] = (base[c] + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }

    // place shapes
    let count = match difficulty {
        Difficulty::Easy => rng.gen_range(1..=2usize),
        Difficulty::Hard => rng.gen_range(2..=4usize),
    };
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    for i in 0..count {
        let size = match difficulty {
            Difficulty::Easy => rng.gen_range(EASY_SIZE.0..EASY_SIZE.1),
            Difficulty::Hard => {
                if i == 0 || rng.gen_bool(0.5) {
                    rng.gen_range(HARD_SMALL_SIZE.0..HARD_SMALL_SIZE.1)
                } else {
                    rng.gen_range(HARD_LARGE_SIZE.0..HARD_LARGE_SIZE.1)
                }
            }
        };
        let class = rng.gen_range(0..NUM_CLASSES);
        let jitter = rng.gen_range(0.80..1.10);
        let color = [
            (CLASS_COLORS[class][0] * jitter).clamp(0.0, 1.0),
            (CLASS_COLORS[class][1] * jitter).clamp(0.0, 1.0),
            (CLASS_COLORS[class][2] * jitter).clamp(0.0, 1.0),
        ];
        let r = 0.5 * size;
        let mut placed = None;
        for _ in 0..20 {
            let cx = rng.gen_range(1.0 + r..(n as f64 - 1.0 - r));
            let cy = rng.gen_range(1.0 + r..(n as f64 - 1.0 - r));
            let cand = Shape { class, cx, cy, size, color };
            let overlap = shapes.iter().any(|s| iou(&cand.bbox(), &s.bbox()) > 0.3);
            if !overlap {
                placed = Some(cand);
                break;
            }
            placed = Some(cand); // bounded retries; last candidate wins
        }
        shapes.push(placed.expect("at least one placement attempt"));
    }

    // rasterize with subpixel coverage, later shapes over earlier ones
    let ss = SUPERSAMPLE as f64;
    for shape in &shapes {
        let b = shape.bbox();
        let x_lo = (b.x1.floor() as isize - 1).max(0) as usize;
        let y_lo = (b.y1.floor() as isize - 1).max(0) as usize;
        let x_hi = (b.x2.ceil() as usize + 1).min(n);
        let y_hi = (b.y2.ceil() as usize + 1).min(n);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let mut inside = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 + (sx as f64 + 0.5) / ss;
                        let py = y as f64 + (sy as f64 + 0.5) / ss;
                        if shape.contains(px, py) {
                            inside += 1;
                        }
                    }
                }
                if inside == 0 {
                    continue;
                }
                let alpha = inside as f64 / (ss * ss);
                for c in 0..3 {
                    let idx = c * n * n + y * n + x;
                    let v = img[idx] as f64 * (1.0 - alpha) + shape.color[c] * alpha;
                    img[idx] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }

    let objects = shapes
        .iter()
        .map(|s| {
            let b = s.bbox();
            SceneObject { class: s.class, bbox: [b.x1, b.y1, b.x2, b.y2] }
        })
        .collect();
    SceneSample {
        image: Tensor::from_vec([3, n, n], img).expect("consistent dims"),
        objects,
        seed,
    }
}

fn scene_stem(index: usize) -> String {
    format!("scene_{index:05}")
}

pub fn write_scene(dir: &Path, index: usize, scene: &SceneSample) -> Result<()> {
    let n = IMAGE_SIZE;
    let data = scene.image.data();
    let mut rgb = vec![0u8; 3 * n * n];
    for p in 0..n * n {
        for c in 0..3 {
            rgb[p * 3 + c] = (data[c * n * n + p] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    let stem = scene_stem(index);
    pnm::write_ppm(&dir.join(format!("{stem}.ppm")), n, n, &rgb)?;
    let sidecar = Sidecar { seed: scene.seed, objects: scene.objects.clone() };
    std::fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

/// Generate `count` scenes with seeds `seed..seed+count` into `dir`.
pub fn generate_dataset(dir: &Path, count: usize, seed: u64, difficulty: Difficulty) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for i in 0..count {
        let scene = gen_scene(seed + i as u64, difficulty);
        write_scene(dir, i, &scene)?;
    }
    Ok(())
}

/// Load every `*.ppm` + sidecar pair, sorted by file name.
pub fn load_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    if !dir.is_dir() {
        return Err(HarnessError::Dataset(format!(
            "dataset directory {} does not exist",
            dir.display()
        )));
    }
    let mut stems: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_suffix(".ppm").map(str::to_string)
        })
        .collect();
    stems.sort();
    let mut scenes = Vec::with_capacity(stems.len());
    for stem in stems {
        let (w, h, rgb) = pnm::read_pnm(&dir.join(format!("{stem}.ppm")))?.to_rgb();
        if w != IMAGE_SIZE || h != IMAGE_SIZE {
            return Err(HarnessError::Dataset(format!(
                "{stem}.ppm is {w}x{h}, expected {IMAGE_SIZE}x{IMAGE_SIZE}"
            )));
        }
        let n = IMAGE_SIZE;
        let mut data = vec![0f32; 3 * n * n];
        for p in 0..n * n {
            for c in 0..3 {
                data[c * n * n + p] = rgb[p * 3 + c] as f32 / 255.0;
            }
        }
        let sidecar: Sidecar =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        scenes.push(SceneSample {
            image: Tensor::from_vec([3, n, n], data).expect("consistent dims"),
            objects: sidecar.objects,
            seed: sidecar.seed,
        });
    }
    if scenes.is_empty() {
        return Err(HarnessError::Dataset(format!(
            "no scenes found in {}",
            dir.display()
        )));
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let a = gen_scene(7, Difficulty::Hard);
        let b = gen_scene(7, Difficulty::Hard);
        assert_eq!(a.image, b.image);
        assert_eq!(a.objects, b.objects);
        let c = gen_scene(8, Difficulty::Hard);
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn boxes_inside_bounds_and_at_least_one_object() {
        for seed in 0..200 {
            for difficulty in [Difficulty::Easy, Difficulty::Hard] {
                let s = gen_scene(seed, difficulty);
                assert!(!s.objects.is_empty());
                for o in &s.objects {
                    assert!(o.bbox[0] >= 0.0 && o.bbox[1] >= 0.0);
                    assert!(o.bbox[2] <= 64.0 && o.bbox[3] <= 64.0);
                    assert!(o.bbox[0] < o.bbox[2] && o.bbox[1] < o.bbox[3]);
                    assert!(o.class < NUM_CLASSES);
                }
                assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn size_histogram_matches_configured_ranges() {
        let mut easy_sizes = Vec::new();
        let mut hard_sizes = Vec::new();
        for seed in 0..1000 {
            for o in gen_scene(seed, Difficulty::Easy).objects {
                easy_sizes.push(o.bbox[2] - o.bbox[0]);
            }
            for o in gen_scene(seed, Difficulty::Hard).objects {
                hard_sizes.push(o.bbox[2] - o.bbox[0]);
            }
        }
        assert!(easy_sizes.iter().all(|&s| (EASY_SIZE.0..EASY_SIZE.1).contains(&s)));
        assert!(hard_sizes
            .iter()
            .all(|&s| (HARD_SMALL_SIZE.0..HARD_SMALL_SIZE.1).contains(&s)
                || (HARD_LARGE_SIZE.0..HARD_LARGE_SIZE.1).contains(&s)));
        // both buckets are populated on hard
        let small = hard_sizes.iter().filter(|&&s| s < HARD_SMALL_SIZE.1).count();
        let large = hard_sizes.iter().filter(|&&s| s >= HARD_LARGE_SIZE.0).count();
        assert!(small > 100 && large > 100, "small {small}, large {large}");
        // hard scenes always include a small object
        for seed in 0..100 {
            let s = gen_scene(seed, Difficulty::Hard);
            assert!(s
                .objects
                .iter()
                .any(|o| (o.bbox[2] - o.bbox[0]) < HARD_SMALL_SIZE.1));
        }
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), 4, 10, Difficulty::Easy).unwrap();
        let scenes = load_dataset(dir.path()).unwrap();
        assert_eq!(scenes.len(), 4);
        // ground truth survives exactly; pixels within quantization error
        let original = gen_scene(10, Difficulty::Easy);
        assert_eq!(scenes[0].objects, original.objects);
        for (a, b) in scenes[0].image.data().iter().zip(original.image.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert!(load_dataset(&dir.path().join("missing")).is_err());
    }
}
