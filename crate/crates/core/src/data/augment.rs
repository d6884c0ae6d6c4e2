//! Two-view augmentation (random resized crop, flip, color jitter, grayscale,
//! blur) and the deterministic resize paths used for `original` and test-time
//! preprocessing.

use candle_core::Tensor;
use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::manifest::ImageRecord;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::device;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugPolicy {
    pub train_size: u32,
    pub crop_scale: [f64; 2],
    pub crop_ratio: [f64; 2],
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
    pub test_resize: u32,
    pub test_crop: u32,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self {
            train_size: 224,
            crop_scale: [0.2, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: [0.1, 2.0],
            test_resize: 256,
            test_crop: 224,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl AugPolicy {
    /// Policy under which both views reproduce `original` exactly.
    pub fn identity(train_size: u32) -> Self {
        Self {
            train_size,
            crop_scale: [1.0, 1.0],
            crop_ratio: [1.0, 1.0],
            flip_prob: 0.0,
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self, errs: &mut Vec<String>) {
        let prob = |name: &str, p: f64, errs: &mut Vec<String>| {
            if !(0.0..=1.0).contains(&p) {
                errs.push(format!("data.{name} must lie in [0, 1], got {p}"));
            }
        };
        if self.train_size < 8 {
            errs.push(format!("data.train_size must be >= 8, got {}", self.train_size));
        }
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            errs.push(format!("data.crop_scale must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"));
        }
        let [rlo, rhi] = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            errs.push(format!("data.crop_ratio must satisfy 0 < lo <= hi, got [{rlo}, {rhi}]"));
        }
        prob("flip_prob", self.flip_prob, errs);
        prob("jitter_prob", self.jitter_prob, errs);
        prob("grayscale_prob", self.grayscale_prob, errs);
        prob("blur_prob", self.blur_prob, errs);
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(v >= 0.0) {
                errs.push(format!("data.{name} must be >= 0, got {v}"));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            errs.push(format!("data.hue must lie in [0, 0.5], got {}", self.hue));
        }
        let [slo, shi] = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi) {
            errs.push(format!("data.blur_sigma must satisfy 0 < lo <= hi, got [{slo}, {shi}]"));
        }
        if self.test_crop == 0 || self.test_crop > self.test_resize {
            errs.push(format!(
                "data.test_crop must be in 1..=test_resize ({}), got {}",
                self.test_resize, self.test_crop
            ));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            errs.push(format!("data.std entries must be > 0, got {:?}", self.std));
        }
    }
}

/// Two augmented views of one image plus its resize-only copy.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub x: Tensor,
    pub x_prime: Tensor,
    pub original: Tensor,
    pub source_id: usize,
}

/// Interleaved RGB in [0, 1], row-major `h × w × 3`.
struct FloatImage {
    w: usize,
    h: usize,
    px: Vec<f32>,
}

impl FloatImage {
    fn from_rgb(img: &RgbImage) -> Self {
        Self {
            w: img.width() as usize,
            h: img.height() as usize,
            px: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    fn to_tensor(&self, policy: &AugPolicy) -> Result<Tensor> {
        let plane = self.w * self.h;
        let mut chw = vec![0f32; 3 * plane];
        for c in 0..3 {
            let (m, s) = (policy.mean[c] as f32, policy.std[c] as f32);
            for i in 0..plane {
                chw[c * plane + i] = (self.px[i * 3 + c] - m) / s;
            }
        }
        Ok(Tensor::from_vec(chw, (3, self.h, self.w), &device())?)
    }

    fn map_pixels(&mut self, f: impl Fn([f32; 3]) -> [f32; 3]) {
        for p in self.px.chunks_exact_mut(3) {
            let out = f([p[0], p[1], p[2]]);
            for c in 0..3 {
                p[c] = out[c].clamp(0.0, 1.0);
            }
        }
    }

    fn mean_gray(&self) -> f32 {
        let n = (self.w * self.h) as f32;
        self.px.chunks_exact(3).map(|p| gray(p[0], p[1], p[2])).sum::<f32>() / n
    }
}

fn gray(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn jitter_factor(rng: &mut Rng, strength: f64) -> f64 {
    uniform(rng, (1.0 - strength).max(0.0), 1.0 + strength)
}

fn color_jitter(img: &mut FloatImage, policy: &AugPolicy, rng: &mut Rng) {
    let b = jitter_factor(rng, policy.brightness) as f32;
    let c = jitter_factor(rng, policy.contrast) as f32;
    let s = jitter_factor(rng, policy.saturation) as f32;
    let h = uniform(rng, -policy.hue, policy.hue) as f32;
    let mut order = [0u8, 1, 2, 3];
    order.shuffle(rng);
    for op in order {
        match op {
            0 => img.map_pixels(|p| p.map(|v| v * b)),
            1 => {
                let m = img.mean_gray();
                img.map_pixels(|p| p.map(|v| (v - m) * c + m));
            }
            2 => img.map_pixels(|p| {
                let g = gray(p[0], p[1], p[2]);
                p.map(|v| (v - g) * s + g)
            }),
            _ => {
                if h != 0.0 {
                    img.map_pixels(|p| {
                        let [hh, ss, vv] = rgb_to_hsv(p);
                        hsv_to_rgb([hh + h, ss, vv])
                    });
                }
            }
        }
    }
}

fn gaussian_kernel(sigma: f64, max_radius: usize) -> Vec<f32> {
    let radius = ((3.0 * sigma).ceil() as usize).clamp(1, max_radius.max(1));
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k.into_iter().map(|v| v as f32).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

fn gaussian_blur(img: &mut FloatImage, sigma: f64) {
    let (w, h) = (img.w, img.h);
    let k = gaussian_kernel(sigma, w.min(h) / 2);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0f32; img.px.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0f32;
                for (j, kv) in k.iter().enumerate() {
                    let xx = reflect(x as isize + j as isize - r, w);
                    acc += kv * img.px[(y * w + xx) * 3 + c];
                }
                tmp[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0f32;
                for (j, kv) in k.iter().enumerate() {
                    let yy = reflect(y as isize + j as isize - r, h);
                    acc += kv * tmp[(yy * w + x) * 3 + c];
                }
                img.px[(y * w + x) * 3 + c] = acc;
            }
        }
    }
}

/// Crop window `(x, y, w, h)` following the usual random-resized-crop rule:
/// ten rejection-sampled attempts, then a center crop clamped to the ratio
/// range.
fn sample_crop(width: u32, height: u32, policy: &AugPolicy, rng: &mut Rng) -> (u32, u32, u32, u32) {
    let area = (width * height) as f64;
    let (lr0, lr1) = (policy.crop_ratio[0].ln(), policy.crop_ratio[1].ln());
    for _ in 0..10 {
        let target = area * uniform(rng, policy.crop_scale[0], policy.crop_scale[1]);
        let ratio = uniform(rng, lr0, lr1).exp();
        let w = (target * ratio).sqrt().round() as u32;
        let h = (target / ratio).sqrt().round() as u32;
        if w > 0 && h > 0 && w <= width && h <= height {
            let x = rng.random_range(0..=width - w);
            let y = rng.random_range(0..=height - h);
            return (x, y, w, h);
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < policy.crop_ratio[0] {
        (width, ((width as f64 / policy.crop_ratio[0]).round() as u32).max(1))
    } else if in_ratio > policy.crop_ratio[1] {
        (((height as f64 * policy.crop_ratio[1]).round() as u32).max(1), height)
    } else {
        (width, height)
    };
    ((width - w) / 2, (height - h) / 2, w, h)
}

fn augment_view(img: &RgbImage, policy: &AugPolicy, rng: &mut Rng) -> Result<Tensor> {
    let (x, y, w, h) = sample_crop(img.width(), img.height(), policy, rng);
    let cropped = imageops::crop_imm(img, x, y, w, h).to_image();
    let size = policy.train_size;
    let mut resized = imageops::resize(&cropped, size, size, FilterType::Triangle);
    if rng.random::<f64>() < policy.flip_prob {
        imageops::flip_horizontal_in_place(&mut resized);
    }
    let mut f = FloatImage::from_rgb(&resized);
    if rng.random::<f64>() < policy.jitter_prob {
        color_jitter(&mut f, policy, rng);
    }
    if rng.random::<f64>() < policy.grayscale_prob {
        f.map_pixels(|p| [gray(p[0], p[1], p[2]); 3]);
    }
    if rng.random::<f64>() < policy.blur_prob {
        let sigma = uniform(rng, policy.blur_sigma[0], policy.blur_sigma[1]);
        gaussian_blur(&mut f, sigma);
    }
    f.to_tensor(policy)
}

/// Deterministic resize of the full image to `train_size × train_size`.
pub fn original_view(img: &RgbImage, policy: &AugPolicy) -> Result<Tensor> {
    let size = policy.train_size;
    let resized = imageops::resize(img, size, size, FilterType::Triangle);
    FloatImage::from_rgb(&resized).to_tensor(policy)
}

/// Two independently augmented views and the resize-only original. The
/// first view consumes the generator before the second, so a given seed
/// fixes the whole pair.
pub fn two_view_from_image(
    img: &RgbImage,
    source_id: usize,
    policy: &AugPolicy,
    rng: &mut Rng,
) -> Result<ViewPair> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Contract("cannot augment an empty image".into()));
    }
    let x = augment_view(img, policy, rng)?;
    let x_prime = augment_view(img, policy, rng)?;
    let original = original_view(img, policy)?;
    Ok(ViewPair {
        x,
        x_prime,
        original,
        source_id,
    })
}

pub fn two_view_augment(record: &ImageRecord, policy: &AugPolicy, rng: &mut Rng) -> Result<ViewPair> {
    let img = record.load_rgb()?;
    two_view_from_image(&img, record.source_id, policy, rng)
}

/// Shorter side to `test_resize`, center crop `test_crop`, normalize.
pub fn test_transform_image(img: &RgbImage, policy: &AugPolicy) -> Result<Tensor> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let short = w.min(h);
    let scale = policy.test_resize as f64 / short;
    let nw = ((w * scale).round() as u32).max(policy.test_crop);
    let nh = ((h * scale).round() as u32).max(policy.test_crop);
    let resized = imageops::resize(img, nw, nh, FilterType::Triangle);
    let crop = policy.test_crop;
    let x0 = ((nw - crop) as f64 / 2.0).round() as u32;
    let y0 = ((nh - crop) as f64 / 2.0).round() as u32;
    let cropped = imageops::crop_imm(&resized, x0, y0, crop, crop).to_image();
    FloatImage::from_rgb(&cropped).to_tensor(policy)
}

pub fn test_transform(record: &ImageRecord, policy: &AugPolicy) -> Result<Tensor> {
    test_transform_image(&record.load_rgb()?, policy)
}

/// Per-channel mean and standard deviation of the images after the
/// deterministic train-size resize.
pub fn channel_stats(images: &[RgbImage], train_size: u32) -> ([f64; 3], [f64; 3]) {
    let mut sum = [0f64; 3];
    let mut sq = [0f64; 3];
    let mut n = 0f64;
    for img in images {
        let resized = imageops::resize(img, train_size, train_size, FilterType::Triangle);
        for p in resized.pixels() {
            for c in 0..3 {
                let v = p[c] as f64 / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
            n += 1.0;
        }
    }
    let mut mean = [0f64; 3];
    let mut std = [1f64; 3];
    if n > 0.0 {
        for c in 0..3 {
            mean[c] = sum[c] / n;
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(1e-12).sqrt();
        }
    }
    (mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use crate::tensor::to_f32_vec;

    fn checker(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([(x * 7 % 256) as u8, (y * 13 % 256) as u8, ((x + y) * 3 % 256) as u8])
        })
    }

    fn small_policy() -> AugPolicy {
        AugPolicy {
            train_size: 32,
            test_resize: 36,
            test_crop: 32,
            ..AugPolicy::default()
        }
    }

    #[test]
    fn same_seed_same_views() {
        let img = checker(48, 40);
        let p = small_policy();
        let a = two_view_from_image(&img, 3, &p, &mut rng_for(1, &[2])).unwrap();
        let b = two_view_from_image(&img, 3, &p, &mut rng_for(1, &[2])).unwrap();
        assert_eq!(to_f32_vec(&a.x).unwrap(), to_f32_vec(&b.x).unwrap());
        assert_eq!(to_f32_vec(&a.x_prime).unwrap(), to_f32_vec(&b.x_prime).unwrap());
        assert_eq!(to_f32_vec(&a.original).unwrap(), to_f32_vec(&b.original).unwrap());
    }

    #[test]
    fn different_seeds_differ_but_original_does_not() {
        let img = checker(48, 48);
        let p = small_policy();
        let a = two_view_from_image(&img, 0, &p, &mut rng_for(1, &[2])).unwrap();
        let b = two_view_from_image(&img, 0, &p, &mut rng_for(9, &[2])).unwrap();
        assert_ne!(to_f32_vec(&a.x).unwrap(), to_f32_vec(&b.x).unwrap());
        assert_eq!(to_f32_vec(&a.original).unwrap(), to_f32_vec(&b.original).unwrap());
    }

    #[test]
    fn identity_policy_reproduces_original() {
        let img = checker(40, 40);
        let p = AugPolicy::identity(24);
        let v = two_view_from_image(&img, 0, &p, &mut rng_for(5, &[])).unwrap();
        let o = to_f32_vec(&v.original).unwrap();
        assert_eq!(to_f32_vec(&v.x).unwrap(), o);
        assert_eq!(to_f32_vec(&v.x_prime).unwrap(), o);
        assert_eq!(v.x.dims(), &[3, 24, 24]);
    }

    #[test]
    fn test_transform_shapes_and_determinism() {
        let p = AugPolicy::default();
        let big = checker(512, 512);
        let t = test_transform_image(&big, &p).unwrap();
        assert_eq!(t.dims(), &[3, 224, 224]);
        assert_eq!(
            to_f32_vec(&t).unwrap(),
            to_f32_vec(&test_transform_image(&big, &p).unwrap()).unwrap()
        );
    }

    #[test]
    fn test_transform_resizes_before_cropping() {
        let p = AugPolicy::default();
        let img = checker(224, 224);
        let t = test_transform_image(&img, &p).unwrap();
        assert_eq!(t.dims(), &[3, 224, 224]);
        // A pass-through would equal plain normalization of the input.
        let passthrough = FloatImage::from_rgb(&img).to_tensor(&p).unwrap();
        assert_ne!(to_f32_vec(&t).unwrap(), to_f32_vec(&passthrough).unwrap());
    }

    #[test]
    fn hsv_round_trip() {
        for p in [[0.2f32, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.9, 0.8, 0.1]] {
            let back = hsv_to_rgb(rgb_to_hsv(p));
            for c in 0..3 {
                assert!((back[c] - p[c]).abs() < 1e-5, "{p:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn crop_fallback_stays_inside() {
        let p = AugPolicy {
            crop_scale: [1.0, 1.0],
            crop_ratio: [2.0, 3.0],
            ..AugPolicy::default()
        };
        let mut rng = rng_for(0, &[]);
        let (x, y, w, h) = sample_crop(40, 40, &p, &mut rng);
        assert!(x + w <= 40 && y + h <= 40 && w > 0 && h > 0);
    }

    #[test]
    fn policy_validation_collects_errors() {
        let p = AugPolicy {
            flip_prob: 1.5,
            crop_scale: [0.0, 1.0],
            test_crop: 300,
            ..AugPolicy::default()
        };
        let mut errs = Vec::new();
        p.validate(&mut errs);
        assert_eq!(errs.len(), 3, "{errs:?}");
    }
}
