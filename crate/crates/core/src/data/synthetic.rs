//! Deterministic fine-grained toy dataset. Every class draws the same
//! bird-like silhouette (elliptic body, round head, tail wedge) in the same
//! palette; classes differ only in the number of dark bands across the body.
//! Background clutter is drawn from its own random stream and sits beneath the
//! object, so changing the clutter density never changes object pixels.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Rng, STREAM_SYNTH};

/// Nominal body color. The fixture teacher keys on it.
pub const BODY_COLOR: [u8; 3] = [220, 140, 40];
/// Nominal band color.
pub const STRIPE_COLOR: [u8; 3] = [60, 30, 20];
const BODY_JITTER: i32 = 12;
const STRIPE_JITTER: i32 = 8;

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub canvas: u32,
    pub seed: u64,
    /// Expected clutter shapes per 64×64 area.
    pub background_clutter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            per_class: 64,
            canvas: 64,
            seed: 7,
            background_clutter: 4.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self, errs: &mut Vec<String>) {
        if self.num_classes < 2 {
            errs.push(format!("synthetic.num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.per_class == 0 {
            errs.push("synthetic.per_class must be >= 1".into());
        }
        if self.canvas < 16 {
            errs.push(format!("synthetic.canvas must be >= 16, got {}", self.canvas));
        } else if self.num_classes >= 2 && self.band_width(0.56 * self.canvas as f64) < 1.0 {
            errs.push(format!(
                "synthetic.canvas {} too small to draw {} distinct band counts",
                self.canvas, self.num_classes
            ));
        }
        if !(self.background_clutter >= 0.0) {
            errs.push(format!(
                "synthetic.background_clutter must be >= 0, got {}",
                self.background_clutter
            ));
        }
    }

    fn band_width(&self, body_width: f64) -> f64 {
        body_width / (2.0 * self.num_classes as f64 + 2.0)
    }

    /// Test split rule: within each class, every fifth image (index ≡ 0 mod 5).
    pub fn is_test(index: usize) -> bool {
        index % 5 == 0
    }
}

struct ObjectParams {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    facing: f64,
    body: [u8; 3],
    stripe: [u8; 3],
}

fn jitter_color(base: [u8; 3], amount: i32, rng: &mut Rng) -> [u8; 3] {
    base.map(|c| (c as i32 + rng.random_range(-amount..=amount)).clamp(0, 255) as u8)
}

fn sample_object(canvas: f64, rng: &mut Rng) -> ObjectParams {
    ObjectParams {
        cx: canvas / 2.0 + rng.random_range(-0.08..0.08) * canvas,
        cy: canvas / 2.0 + rng.random_range(-0.08..0.08) * canvas,
        a: rng.random_range(0.28..0.32) * canvas,
        b: rng.random_range(0.15..0.18) * canvas,
        facing: if rng.random::<bool>() { 1.0 } else { -1.0 },
        body: jitter_color(BODY_COLOR, BODY_JITTER, rng),
        stripe: jitter_color(STRIPE_COLOR, STRIPE_JITTER, rng),
    }
}

fn in_triangle(p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
    let cross = |o: (f64, f64), u: (f64, f64), v: (f64, f64)| {
        (u.0 - o.0) * (v.1 - o.1) - (u.1 - o.1) * (v.0 - o.0)
    };
    let d1 = cross(p, a, b);
    let d2 = cross(p, b, c);
    let d3 = cross(p, c, a);
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

fn paint_background(img: &mut RgbImage, rng: &mut Rng) {
    let mut tint = || {
        [
            rng.random_range(140..200) as f64,
            rng.random_range(150..210) as f64,
            rng.random_range(170..230) as f64,
        ]
    };
    let top = tint();
    let bottom = tint();
    let h = img.height() as f64;
    for (_, y, p) in img.enumerate_pixels_mut() {
        let t = (y as f64 + 0.5) / h;
        *p = Rgb([0, 1, 2].map(|c| (top[c] * (1.0 - t) + bottom[c] * t).round() as u8));
    }
}

fn paint_clutter(img: &mut RgbImage, density: f64, rng: &mut Rng) {
    let canvas = img.width() as f64;
    let expected = density * (canvas / 64.0).powi(2);
    let count = expected.floor() as usize + usize::from(rng.random::<f64>() < expected.fract());
    for _ in 0..count {
        let color = Rgb([
            rng.random_range(20..120u8),
            rng.random_range(90..200u8),
            rng.random_range(90..230u8),
        ]);
        let cx = rng.random_range(0.0..canvas);
        let cy = rng.random_range(0.0..canvas);
        let r = rng.random_range(0.03..0.10) * canvas;
        let square = rng.random::<bool>();
        for (x, y, p) in img.enumerate_pixels_mut() {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let inside = if square {
                dx.abs() <= r && dy.abs() <= r * 0.6
            } else {
                dx * dx + dy * dy <= r * r
            };
            if inside {
                *p = color;
            }
        }
    }
}

/// Renders one image and its object mask (row-major, `true` on object pixels).
pub fn render_sample(spec: &SyntheticSpec, class: usize, index: usize) -> (RgbImage, Vec<bool>) {
    let canvas = spec.canvas;
    let c = canvas as f64;
    let key = [STREAM_SYNTH, class as u64, index as u64];
    let stream = |tag: u64| rng_for(spec.seed, &[key[0], key[1], key[2], tag]);

    let mut img = RgbImage::new(canvas, canvas);
    paint_background(&mut img, &mut stream(1));
    paint_clutter(&mut img, spec.background_clutter, &mut stream(2));

    let o = sample_object(c, &mut stream(3));
    let bands = class + 1;
    let band_w = spec.band_width(2.0 * o.a);
    let spacing = 2.0 * o.a / (bands as f64 + 1.0);
    let head = (o.cx + o.facing * o.a * 0.9, o.cy - o.b * 0.7, o.b * 0.6);
    let tail = (
        (o.cx - o.facing * o.a * 0.85, o.cy),
        (o.cx - o.facing * o.a * 1.35, o.cy - o.b * 0.6),
        (o.cx - o.facing * o.a * 1.35, o.cy + o.b * 0.5),
    );

    let mut mask = vec![false; (canvas * canvas) as usize];
    for (x, y, p) in img.enumerate_pixels_mut() {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (ex, ey) = ((px - o.cx) / o.a, (py - o.cy) / o.b);
        let in_body = ex * ex + ey * ey <= 1.0;
        let (hx, hy) = (px - head.0, py - head.1);
        let in_head = hx * hx + hy * hy <= head.2 * head.2;
        let in_tail = in_triangle((px, py), tail.0, tail.1, tail.2);
        if !(in_body || in_head || in_tail) {
            continue;
        }
        mask[(y * canvas + x) as usize] = true;
        let on_band = in_body
            && (0..bands).any(|j| {
                let center = o.cx - o.a + (j as f64 + 1.0) * spacing;
                (px - center).abs() <= band_w / 2.0
            });
        *p = Rgb(if on_band { o.stripe } else { o.body });
    }
    (img, mask)
}

/// Writes `num_classes × per_class` PNGs under `out_dir/images` and a
/// manifest at `out_dir/manifest.tsv`. Output is a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let mut errs = Vec::new();
    spec.validate(&mut errs);
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let out_dir = out_dir.as_ref();
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut manifest = String::new();
    for class in 0..spec.num_classes {
        for index in 0..spec.per_class {
            let (img, _) = render_sample(spec, class, index);
            let rel = format!("images/c{class:03}_{index:04}.png");
            let path = out_dir.join(&rel);
            img.save(&path)?;
            let split = if SyntheticSpec::is_test(index) { "test" } else { "train" };
            manifest.push_str(&format!("{rel}\t{class}\t{split}\n"));
        }
    }
    let manifest_path = out_dir.join(MANIFEST_NAME);
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::{Manifest, Split};

    #[test]
    fn split_counts_for_two_by_four() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            num_classes: 2,
            per_class: 4,
            canvas: 32,
            seed: 1,
            background_clutter: 4.0,
        };
        let m = Manifest::load(generate_synthetic(&spec, dir.path()).unwrap()).unwrap();
        assert_eq!(m.len(), 8);
        assert_eq!(m.split(Split::Train).len(), 6);
        assert_eq!(m.split(Split::Test).len(), 2);
        assert_eq!(m.num_classes(), 2);
        assert!(m.records.iter().all(|r| r.load_rgb().is_ok()));
    }

    #[test]
    fn clutter_only_touches_background() {
        let base = SyntheticSpec {
            background_clutter: 0.0,
            ..SyntheticSpec::default()
        };
        let busy = SyntheticSpec {
            background_clutter: 30.0,
            ..base.clone()
        };
        for (class, index) in [(0, 0), (3, 5), (7, 11)] {
            let (a, mask) = render_sample(&base, class, index);
            let (b, mask_b) = render_sample(&busy, class, index);
            assert_eq!(mask, mask_b);
            let mut outside_diff = 0;
            for (i, (pa, pb)) in a.pixels().zip(b.pixels()).enumerate() {
                if mask[i] {
                    assert_eq!(pa, pb, "object pixel {i} changed");
                } else if pa != pb {
                    outside_diff += 1;
                }
            }
            assert!(outside_diff > 0);
        }
    }

    #[test]
    fn band_pixels_grow_with_class() {
        let spec = SyntheticSpec::default();
        let band_px = |class, index| {
            let (img, _) = render_sample(&spec, class, index);
            img.pixels()
                .filter(|p| {
                    (0..3).all(|c| (p[c] as i32 - STRIPE_COLOR[c] as i32).abs() <= STRIPE_JITTER)
                })
                .count()
        };
        let means: Vec<f64> = (0..spec.num_classes)
            .map(|class| (0..10).map(|i| band_px(class, i) as f64).sum::<f64>() / 10.0)
            .collect();
        assert!(means.windows(2).all(|w| w[1] > w[0]), "{means:?}");
    }

    #[test]
    fn too_many_classes_for_canvas_rejected() {
        let spec = SyntheticSpec {
            num_classes: 40,
            canvas: 32,
            ..SyntheticSpec::default()
        };
        let mut errs = Vec::new();
        spec.validate(&mut errs);
        assert_eq!(errs.len(), 1);
    }
}
