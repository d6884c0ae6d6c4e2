//! Heatmap export for z′, w and the saliency label.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::seq::index::sample;

use crate::ais::spatial_attention;
use crate::data::{original_view, ImageRecord, Manifest, Split};
use crate::error::{Error, Result};
use crate::iadm::image_attention;
use crate::rng::{rng_for, STREAM_VIZ};
use crate::tensor::to_f64_vec;
use crate::trainer::{compute_keys, saliency_label, Checkpoint};

/// Min-max scaling to `0..=255`; a flat map becomes all zeros.
pub fn to_gray(map: &[f64], w: u32, h: u32) -> GrayImage {
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    GrayImage::from_fn(w, h, |x, y| {
        let v = map[(y * w + x) as usize];
        let s = if span > 0.0 { (v - lo) / span } else { 0.0 };
        Luma([(s * 255.0).round() as u8])
    })
}

fn overlay(img: &RgbImage, heat: &GrayImage) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y);
        let a = heat.get_pixel(x, y)[0] as f64 / 255.0;
        let mix = |c: u8, t: f64| ((1.0 - 0.5 * a) * c as f64 + 0.5 * a * t).round() as u8;
        Rgb([mix(p[0], 255.0), mix(p[1], 0.0), mix(p[2], 0.0)])
    })
}

/// Test-split records chosen by `seed`, in manifest order.
pub fn sample_records(manifest: &Manifest, n: usize, seed: u64) -> Vec<&ImageRecord> {
    let test = manifest.split(Split::Test);
    let pool = if test.is_empty() { manifest.records.iter().collect() } else { test };
    let mut idx = sample(&mut rng_for(seed, &[STREAM_VIZ]), pool.len(), n.min(pool.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i]).collect()
}

/// Writes `<id>_zprime.png`, `<id>_w.png`, `<id>_gradcam.png` and
/// `<id>_overlay.png` per sampled image. The sampled images form one batch
/// for the saliency pass, so the label of each depends on its batch mates.
pub fn visualize(ck: &Checkpoint, manifest: &Manifest, out_dir: &Path, n: usize, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let records = sample_records(manifest, n, seed);
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = &ck.config;
    let policy = &cfg.data.augment;
    let model = &ck.model;
    let images: Vec<RgbImage> = records.iter().map(|r| r.load_rgb()).collect::<Result<_>>()?;
    let views: Vec<Tensor> = images.iter().map(|i| original_view(i, policy)).collect::<Result<_>>()?;
    let original = Tensor::stack(&views, 0)?.to_dtype(model.dtype())?;
    let (b, _, h, w) = original.dims4()?;

    let fm = model.state.student.encode(&original, false)?.feature_map;
    let z = spatial_attention(&fm, &model.ais.psi)?.upsample_nearest2d(h, w)?;
    let wmap = image_attention(&original, &model.iadm)?;
    let k = compute_keys(model, &original)?;
    let label = saliency_label(model, &original, &k, &ck.queue, cfg)?;

    let per = h * w;
    let (z, wmap, g) = (to_f64_vec(&z)?, to_f64_vec(&wmap)?, to_f64_vec(&label.map)?);
    let mut out = Vec::new();
    for i in 0..b {
        let id = records[i].source_id;
        let s = i * per..(i + 1) * per;
        let (wu, hu) = (w as u32, h as u32);
        let heat = to_gray(&g[s.clone()], wu, hu);
        let base = imageops::resize(&images[i], wu, hu, FilterType::Triangle);
        let path = |kind: &str| out_dir.join(format!("{id:05}_{kind}.png"));
        to_gray(&z[s.clone()], wu, hu).save(path("zprime"))?;
        to_gray(&wmap[s], wu, hu).save(path("w"))?;
        heat.save(path("gradcam"))?;
        overlay(&base, &heat).save(path("overlay"))?;
        out.extend(["zprime", "w", "gradcam", "overlay"].map(path));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_scaling_is_min_max() {
        let g = to_gray(&[2.0, 4.0, 3.0, 2.0], 2, 2);
        assert_eq!(g.into_raw(), vec![0, 255, 128, 0]);
        assert_eq!(to_gray(&[1.0; 4], 2, 2).into_raw(), vec![0; 4]);
    }
}
