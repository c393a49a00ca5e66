//! Weak (flip-only) and strong (flip + photometric) views.
//!
//! Both views of one image share a single [`GeoTransform`], so pixel `(i, j)`
//! of the weak view and of the strong view come from the same source pixel.
//! Photometric operations never move pixels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LabelMap;
use crate::error::{contract, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub hflip: bool,
    pub vflip: bool,
}

impl GeoTransform {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        Self {
            hflip: rng.gen_bool(0.5),
            vflip: rng.gen_bool(0.5),
        }
    }

    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        (
            if self.vflip { h - 1 - y } else { y },
            if self.hflip { w - 1 - x } else { x },
        )
    }

    pub fn apply_labels(&self, labels: &LabelMap) -> LabelMap {
        let (h, w) = (labels.height, labels.width);
        let mut data = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source(y, x, h, w);
                data[y * w + x] = labels.data[sy * w + sx];
            }
        }
        LabelMap {
            height: h,
            width: w,
            data,
        }
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w, 3] => Ok((h, w)),
        _ => contract!("expected an H×W×3 image, got {:?}", image.shape()),
    }
}

/// Applies the flips in `geo` and nothing else.
pub fn weak_view(image: &Tensor, geo: GeoTransform) -> Result<Tensor> {
    let (h, w) = image_dims(image)?;
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = geo.source(y, x, h, w);
            out[(y * w + x) * 3..][..3].copy_from_slice(&src[(sy * w + sx) * 3..][..3]);
        }
    }
    Tensor::new(vec![h, w, 3], out)
}

/// Photometric parameters of one strong view.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Photometric {
    /// Per-channel `(scale, shift)`.
    pub jitter: Option<[[f64; 2]; 3]>,
    pub gray: bool,
    pub blur_sigma: Option<f64>,
}

impl Photometric {
    pub const SCALE: (f64, f64) = (0.6, 1.4);
    pub const SHIFT: (f64, f64) = (-0.2, 0.2);
    pub const GRAY_P: f64 = 0.2;
    pub const BLUR_P: f64 = 0.5;
    pub const SIGMA: (f64, f64) = (0.1, 2.0);

    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let jitter = [0, 1, 2].map(|_| {
            [
                rng.gen_range(Self::SCALE.0..=Self::SCALE.1),
                rng.gen_range(Self::SHIFT.0..=Self::SHIFT.1),
            ]
        });
        let gray = rng.gen_bool(Self::GRAY_P);
        let blur = rng.gen_bool(Self::BLUR_P);
        let sigma = rng.gen_range(Self::SIGMA.0..=Self::SIGMA.1);
        Self {
            jitter: Some(jitter),
            gray,
            blur_sigma: blur.then_some(sigma),
        }
    }
}

/// Jitter, then graying, then blur; the result is clamped to `[0, 1]`.
pub fn apply_photometric(image: &Tensor, p: &Photometric) -> Result<Tensor> {
    let (h, w) = image_dims(image)?;
    let mut data = image.data().to_vec();
    if let Some(j) = p.jitter {
        for px in data.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = (j[c][0] * px[c] + j[c][1]).clamp(0.0, 1.0);
            }
        }
    }
    if p.gray {
        for px in data.chunks_exact_mut(3) {
            let m = (px[0] + px[1] + px[2]) / 3.0;
            px.fill(m);
        }
    }
    let mut out = Tensor::new(vec![h, w, 3], data)?;
    if let Some(sigma) = p.blur_sigma {
        out = gaussian_blur(&out, sigma)?;
    }
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

/// Half-sample symmetric reflection: `-1 → 0`, `n → n-1`, repeated as needed.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian blur with radius `⌈3σ⌉` and symmetric reflective
/// padding. The operator is doubly stochastic, so the image mean is kept.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let (h, w) = image_dims(image)?;
    if !(sigma > 0.0) {
        contract!("blur sigma must be positive, got {sigma}");
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let src = image.data();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, d) in kernel.iter().zip(-radius..=radius) {
                    let sx = reflect(x as isize + d, w);
                    acc += k * src[(y * w + sx) * 3 + c];
                }
                tmp[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, d) in kernel.iter().zip(-radius..=radius) {
                    let sy = reflect(y as isize + d, h);
                    acc += k * tmp[(sy * w + x) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    Tensor::new(vec![h, w, 3], out)
}

/// Weak view with `geo`, then photometric operations drawn from `seed`.
pub fn strong_view(image: &Tensor, geo: GeoTransform, seed: u64) -> Result<Tensor> {
    let p = Photometric::sample(&mut stream_rng(seed, Stream::Augment, 1));
    apply_photometric(&weak_view(image, geo)?, &p)
}

/// Spatially aligned weak and strong views of one unlabeled image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub weak: Tensor,
    pub strong: Tensor,
    pub geo: GeoTransform,
    pub photometric: Photometric,
}

impl ViewPair {
    /// Draws the shared flips and the photometric parameters from `seed`.
    pub fn new(image: &Tensor, seed: u64) -> Result<Self> {
        let geo = GeoTransform::sample(&mut stream_rng(seed, Stream::Augment, 0));
        let photometric = Photometric::sample(&mut stream_rng(seed, Stream::Augment, 1));
        let weak = weak_view(image, geo)?;
        let strong = apply_photometric(&weak, &photometric)?;
        Ok(Self {
            weak,
            strong,
            geo,
            photometric,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[h, w, 3], |i| ((i * 2654435761) % 1000) as f64 / 1000.0)
    }

    #[test]
    fn identity_and_involution() {
        let img = image(4, 6);
        assert_eq!(weak_view(&img, GeoTransform::default()).unwrap(), img);
        let h = GeoTransform {
            hflip: true,
            vflip: false,
        };
        assert_eq!(weak_view(&weak_view(&img, h).unwrap(), h).unwrap(), img);
    }

    #[test]
    fn vflip_moves_origin_to_last_row() {
        let img = image(4, 6);
        let v = GeoTransform {
            hflip: false,
            vflip: true,
        };
        let out = weak_view(&img, v).unwrap();
        assert_eq!(&out.data()[3 * 6 * 3..][..3], &img.data()[..3]);
    }

    #[test]
    fn disabled_photometrics_equal_weak_view() {
        let img = image(8, 8);
        let geo = GeoTransform {
            hflip: true,
            vflip: true,
        };
        let weak = weak_view(&img, geo).unwrap();
        let strong = apply_photometric(&weak, &Photometric::default()).unwrap();
        assert_eq!(strong, weak);
    }

    #[test]
    fn graying_equalises_channels() {
        let img = image(5, 5);
        let p = Photometric {
            gray: true,
            ..Default::default()
        };
        let out = apply_photometric(&img, &p).unwrap();
        for px in out.data().chunks_exact(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }
    }

    #[test]
    fn blur_preserves_mean() {
        // direct summation of the mean before and after
        for (h, w, sigma) in [(8, 8, 0.7), (16, 12, 2.0), (6, 10, 1.3), (8, 8, 3.5)] {
            let img = image(h, w);
            let out = gaussian_blur(&img, sigma).unwrap();
            for c in 0..3 {
                let before: f64 = img.data().iter().skip(c).step_by(3).sum::<f64>();
                let after: f64 = out.data().iter().skip(c).step_by(3).sum::<f64>();
                let n = (h * w) as f64;
                assert!((before / n - after / n).abs() < 1e-6, "{h}x{w} σ={sigma}");
            }
        }
    }

    #[test]
    fn views_share_geometry() {
        let img = image(8, 8);
        for seed in 0..20 {
            let pair = ViewPair::new(&img, seed).unwrap();
            assert_eq!(pair.weak, weak_view(&img, pair.geo).unwrap());
            assert_eq!(pair.strong, strong_view(&img, pair.geo, seed).unwrap());
            let flat = Photometric {
                blur_sigma: None,
                ..pair.photometric
            };
            // photometric ops act per pixel once blur is removed
            let s = apply_photometric(&pair.weak, &flat).unwrap();
            let per_pixel = apply_photometric(&img, &flat).unwrap();
            assert_eq!(s, weak_view(&per_pixel, pair.geo).unwrap());
        }
    }

    #[test]
    fn label_flips_follow_images() {
        let labels = LabelMap {
            height: 2,
            width: 3,
            data: vec![0, 1, 2, 3, 4, 5],
        };
        let g = GeoTransform {
            hflip: true,
            vflip: true,
        };
        assert_eq!(g.apply_labels(&labels).data, vec![5, 4, 3, 2, 1, 0]);
    }
}
