//! Synthetic segmentation scenes, labeled/unlabeled splits and the weak/strong
//! view pipeline.
//!
//! Images are `H×W×3` tensors with values in `[0, 1]`; label maps are `H×W`
//! bytes with class 0 as background.

mod augment;
mod io;

pub use augment::{
    apply_photometric, gaussian_blur, strong_view, weak_view, GeoTransform, Photometric, ViewPair,
};
pub use io::{read_dataset, write_dataset, DatasetMeta};

use std::f64::consts::PI;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// Total downsampling factor of the encoder; image sides must be multiples.
pub const ENCODER_STRIDE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPalette {
    pub name: String,
    /// Base RGB colors; each shape picks one.
    pub colors: Vec<[f64; 3]>,
    /// Per-channel uniform deviation added to the picked base color.
    pub jitter: f64,
    #[serde(default)]
    pub texture: Texture,
    /// Relative brightness modulation of the texture, `fill·(1 ± contrast)`.
    #[serde(default)]
    pub contrast: f64,
}

/// Two-level brightness pattern in image coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    #[default]
    Flat,
    HStripes { period: usize },
    VStripes { period: usize },
    Checker { cell: usize },
}

impl Texture {
    /// `+1`, `−1`, or `0` for flat fills.
    pub fn sign(self, x: usize, y: usize) -> f64 {
        let odd = match self {
            Texture::Flat => return 0.0,
            Texture::HStripes { period } => (2 * y / period.max(2)) % 2 == 1,
            Texture::VStripes { period } => (2 * x / period.max(2)) % 2 == 1,
            Texture::Checker { cell } => (x / cell.max(1) + y / cell.max(1)) % 2 == 1,
        };
        if odd {
            -1.0
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Inclusive range of foreground shapes per image.
    pub shapes_per_image: [usize; 2],
    /// Inclusive range of shape radii, as a fraction of the shorter side.
    pub shape_size: [f64; 2],
    pub palettes: Vec<ClassPalette>,
    /// Amplitude of per-pixel uniform noise.
    pub noise: f64,
    /// Maximum relative per-image, per-channel illumination gain deviation.
    pub lighting: f64,
    pub samples: usize,
    pub seed: u64,
}

impl DatasetSpec {
    /// Default scene family: `num_classes − 1` foreground classes with
    /// partially overlapping color palettes over a textured background.
    pub fn synthetic(side: usize, num_classes: usize, samples: usize, seed: u64) -> Self {
        let base: [[f64; 3]; 6] = [
            [0.80, 0.30, 0.25],
            [0.30, 0.65, 0.35],
            [0.30, 0.40, 0.80],
            [0.75, 0.70, 0.25],
            [0.65, 0.30, 0.70],
            [0.25, 0.70, 0.70],
        ];
        let mut palettes = vec![ClassPalette {
            name: "background".into(),
            colors: vec![[0.45, 0.45, 0.45], [0.55, 0.50, 0.45], [0.40, 0.45, 0.50]],
            jitter: 0.10,
            texture: Texture::Flat,
            contrast: 0.0,
        }];
        // classes differ only in texture; every class draws from the same colors
        let textures = [
            Texture::HStripes { period: 8 },
            Texture::VStripes { period: 8 },
            Texture::Checker { cell: 4 },
        ];
        for k in 1..num_classes {
            palettes.push(ClassPalette {
                name: format!("class_{k}"),
                colors: base.to_vec(),
                jitter: 0.12,
                texture: textures[(k - 1) % textures.len()],
                contrast: 0.2,
            });
        }
        Self {
            height: side,
            width: side,
            num_classes,
            shapes_per_image: [1, 2],
            shape_size: [0.10, 0.20],
            palettes,
            noise: 0.10,
            lighting: 0.30,
            samples,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > u8::MAX as usize {
            contract!("num_classes must be in [2, 255], got {}", self.num_classes);
        }
        if self.height == 0
            || self.width == 0
            || self.height % ENCODER_STRIDE != 0
            || self.width % ENCODER_STRIDE != 0
        {
            contract!(
                "image size {}×{} must be a positive multiple of {ENCODER_STRIDE}",
                self.height,
                self.width
            );
        }
        if self.palettes.len() != self.num_classes
            || self.palettes.iter().any(|p| p.colors.is_empty())
        {
            contract!("need one non-empty palette per class");
        }
        if self.palettes.iter().any(|p| !(0.0..1.0).contains(&p.contrast)) {
            contract!("texture contrast must lie in [0, 1)");
        }
        let [lo, hi] = self.shapes_per_image;
        if lo > hi {
            contract!("shapes_per_image range [{lo}, {hi}] is empty");
        }
        let [smin, smax] = self.shape_size;
        if !(smin > 0.0 && smin <= smax && smax <= 0.5) {
            contract!("shape_size range [{smin}, {smax}] must lie in (0, 0.5]");
        }
        if self.noise < 0.0 || !(0.0..1.0).contains(&self.lighting) {
            contract!("noise must be ≥ 0 and lighting in [0, 1)");
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.palettes.iter().map(|p| p.name.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `H×W×3`, values in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Circle,
    Rect { half_w: f64, half_h: f64 },
    Triangle { rotation: f64 },
}

struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    radius: f64,
}

impl Shape {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.radius * self.radius,
            ShapeKind::Rect { half_w, half_h } => dx.abs() <= half_w && dy.abs() <= half_h,
            ShapeKind::Triangle { rotation } => {
                let v: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let a = rotation + 2.0 * PI * k as f64 / 3.0;
                        (self.radius * a.cos(), self.radius * a.sin())
                    })
                    .collect();
                let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| {
                    (bx - ax) * (dy - ay) - (by - ay) * (dx - ax)
                };
                let s = [edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])];
                s.iter().all(|&e| e >= 0.0) || s.iter().all(|&e| e <= 0.0)
            }
        }
    }
}

fn pick_color<R: Rng>(rng: &mut R, palette: &ClassPalette) -> [f64; 3] {
    let base = palette.colors[rng.gen_range(0..palette.colors.len())];
    let j = palette.jitter;
    base.map(|c| if j > 0.0 { c + rng.gen_range(-j..=j) } else { c })
}

/// Renders one scene. Later shapes overwrite earlier ones in both the image
/// and the label map, so labels always match the visible geometry.
pub fn generate_scene(seed: u64, spec: &DatasetSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = stream_rng(seed, Stream::Data, 0);

    let mut color = vec![[0.0f64; 3]; h * w];
    let mut labels = vec![0u8; h * w];

    // background: two-tone vertical gradient
    let top = pick_color(&mut rng, &spec.palettes[0]);
    let bottom = pick_color(&mut rng, &spec.palettes[0]);
    for y in 0..h {
        let t = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            color[y * w + x] = [0, 1, 2].map(|c| (1.0 - t) * top[c] + t * bottom[c]);
        }
    }

    let [lo, hi] = spec.shapes_per_image;
    let n_shapes = rng.gen_range(lo..=hi);
    let side = h.min(w) as f64;
    for _ in 0..n_shapes {
        let class = rng.gen_range(1..spec.num_classes);
        let radius = side * rng.gen_range(spec.shape_size[0]..=spec.shape_size[1]);
        let kind = match rng.gen_range(0..3) {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Rect {
                half_w: radius * rng.gen_range(0.6..=1.0),
                half_h: radius * rng.gen_range(0.6..=1.0),
            },
            _ => ShapeKind::Triangle {
                rotation: rng.gen_range(0.0..2.0 * PI),
            },
        };
        let shape = Shape {
            kind,
            cx: rng.gen_range(0.0..w as f64),
            cy: rng.gen_range(0.0..h as f64),
            radius,
        };
        let palette = &spec.palettes[class];
        let fill = pick_color(&mut rng, palette);
        for y in 0..h {
            for x in 0..w {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    let m = 1.0 + palette.contrast * palette.texture.sign(x, y);
                    color[y * w + x] = fill.map(|c| c * m);
                    labels[y * w + x] = class as u8;
                }
            }
        }
    }

    let gain: [f64; 3] = if spec.lighting > 0.0 {
        let l = spec.lighting;
        let g = rng.gen_range(1.0 - l..=1.0 + l);
        [0, 1, 2].map(|_| g * rng.gen_range(1.0 - l / 3.0..=1.0 + l / 3.0))
    } else {
        [1.0; 3]
    };
    let mut data = Vec::with_capacity(h * w * 3);
    for px in &color {
        for c in 0..3 {
            let n = if spec.noise > 0.0 {
                rng.gen_range(-spec.noise..=spec.noise)
            } else {
                0.0
            };
            data.push((gain[c] * px[c] + n).clamp(0.0, 1.0));
        }
    }
    Ok(Scene {
        image: Tensor::new(vec![h, w, 3], data)?,
        labels: LabelMap {
            height: h,
            width: w,
            data: labels,
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub scenes: Vec<Scene>,
}

impl Dataset {
    /// Scene `i` is rendered from the seed `(spec.seed, i)`; generation runs
    /// in parallel without affecting the result.
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let scenes = (0..spec.samples)
            .into_par_iter()
            .map(|i| generate_scene(scene_seed(spec.seed, i), spec))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            scenes,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

pub fn scene_seed(master: u64, index: usize) -> u64 {
    crate::rng::derive_seed(master, Stream::Data, index as u64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub ids: Vec<usize>,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub seed: u64,
}

/// Samples `n_labeled` of `n_total` ids uniformly without replacement.
/// Both subsets are returned in ascending id order.
pub fn make_split(n_total: usize, n_labeled: usize, seed: u64) -> Result<SplitManifest> {
    if n_labeled == 0 || n_labeled > n_total {
        contract!("need 0 < n_labeled ≤ n_total, got {n_labeled} of {n_total}");
    }
    let mut rng = stream_rng(seed, Stream::Split, 0);
    let mut labeled = index::sample(&mut rng, n_total, n_labeled).into_vec();
    labeled.sort_unstable();
    let mut is_labeled = vec![false; n_total];
    labeled.iter().for_each(|&i| is_labeled[i] = true);
    let unlabeled = (0..n_total).filter(|&i| !is_labeled[i]).collect();
    Ok(SplitManifest {
        ids: (0..n_total).collect(),
        labeled,
        unlabeled,
        seed,
    })
}

/// Stacks `H×W×3` images into a `B×3×H×W` batch.
pub fn to_batch(images: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        contract!("empty image batch");
    };
    let (h, w) = match *first.shape() {
        [h, w, 3] => (h, w),
        _ => contract!("expected H×W×3 image, got {:?}", first.shape()),
    };
    let mut data = vec![0.0; images.len() * 3 * h * w];
    for (b, img) in images.iter().enumerate() {
        if img.shape() != first.shape() {
            contract!("image shapes differ within batch");
        }
        for (p, px) in img.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[(b * 3 + c) * h * w + p] = px[c];
            }
        }
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}
