//! Frozen teacher embeddings. The live vision-language model is not part of
//! this crate: `CacheProvider` serves embeddings computed offline, and
//! `FixtureProvider` is a deterministic stand-in for desk-scale runs.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use image::RgbImage;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::data::synthetic::{BODY_COLOR, STRIPE_COLOR};
use crate::embfile::{sidecar_path, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::rng::{rng_for, STREAM_FIXTURE};

pub trait TeacherProvider: Send + Sync {
    fn embed_dim(&self) -> usize;

    /// Unit-norm image embedding u_t for the record `source_id`, whose
    /// decoded pixels are `image`.
    fn image_embedding(&self, source_id: usize, image: &RgbImage) -> Result<Vec<f32>>;

    /// Unit-norm text embedding.
    fn text_embedding(&self, text: &str) -> Result<Vec<f32>>;
}

pub fn teacher_image_embedding(provider: &dyn TeacherProvider, source_id: usize, image: &RgbImage) -> Result<Vec<f32>> {
    let e = provider.image_embedding(source_id, image)?;
    if e.len() != provider.embed_dim() {
        return Err(Error::Structure(format!(
            "teacher returned a {}-dim embedding, expected {}",
            e.len(),
            provider.embed_dim()
        )));
    }
    Ok(e)
}

fn normalized(v: Vec<f64>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::tensor::NORM_EPS);
    v.into_iter().map(|x| (x / n) as f32).collect()
}

pub fn description_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Row key in a teacher cache index.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum CacheKey {
    Image(usize),
    Text(String),
}

impl CacheKey {
    pub fn text(description: &str) -> Self {
        CacheKey::Text(description_hash(description))
    }

    fn parse(line: &str) -> Option<Self> {
        let (kind, key) = line.split_once('\t')?;
        match kind {
            "img" => key.trim().parse().ok().map(CacheKey::Image),
            "txt" => Some(CacheKey::Text(key.trim().to_string())),
            _ => None,
        }
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CacheKey::Image(id) => write!(f, "img\t{id}"),
            CacheKey::Text(h) => write!(f, "txt\t{h}"),
        }
    }
}

/// Teacher embeddings read from a PPSE file plus its `.index` sidecar, one
/// `img<TAB>source_id` or `txt<TAB>sha256(description)` line per row.
#[derive(Debug, Clone)]
pub struct CacheProvider {
    dim: usize,
    rows: HashMap<CacheKey, Vec<f32>>,
}

impl CacheProvider {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let matrix = EmbeddingMatrix::read(path)?;
        let index_path = sidecar_path(path, "index");
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let keys: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if keys.len() != matrix.count() {
            return Err(Error::Format(format!(
                "{} lists {} keys for {} rows",
                index_path.display(),
                keys.len(),
                matrix.count()
            )));
        }
        let mut rows = HashMap::with_capacity(keys.len());
        for (i, line) in keys.iter().enumerate() {
            let key = CacheKey::parse(line).ok_or_else(|| Error::Parse {
                file: index_path.display().to_string(),
                line: i + 1,
                msg: format!("bad cache key `{line}`"),
            })?;
            let row = matrix.row(i).iter().map(|v| *v as f64).collect();
            rows.insert(key, normalized(row));
        }
        Ok(Self { dim: matrix.dim, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.rows.contains_key(key)
    }
}

/// Writes a cache file and its index sidecar.
pub fn write_cache(path: impl AsRef<Path>, dim: usize, entries: &[(CacheKey, Vec<f32>)]) -> Result<()> {
    let path = path.as_ref();
    let rows: Vec<Vec<f32>> = entries.iter().map(|(_, v)| v.clone()).collect();
    EmbeddingMatrix::from_rows(dim, &rows)?.write(path)?;
    let index: String = entries.iter().map(|(k, _)| format!("{k}\n")).collect();
    let index_path = sidecar_path(path, "index");
    fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))
}

impl TeacherProvider for CacheProvider {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn image_embedding(&self, source_id: usize, _image: &RgbImage) -> Result<Vec<f32>> {
        self.rows
            .get(&CacheKey::Image(source_id))
            .cloned()
            .ok_or_else(|| Error::MissingEmbedding(format!("image source_id {source_id}")))
    }

    fn text_embedding(&self, text: &str) -> Result<Vec<f32>> {
        self.rows
            .get(&CacheKey::text(text))
            .cloned()
            .ok_or_else(|| Error::MissingEmbedding(format!("description `{text}`")))
    }
}

/// Deterministic teacher for the synthetic dataset.
///
/// Image embeddings read the fraction of band-colored pixels among all
/// object-colored pixels, which is monotone in the band count that separates
/// the synthetic classes, and place it on a multi-frequency curve on the unit
/// sphere followed by a fixed seeded rotation. Images of the same class land
/// close together; neighbouring classes are separated by the higher
/// frequencies. Text embeddings are seeded Gaussian directions keyed by the
/// description's hash.
#[derive(Debug, Clone)]
pub struct FixtureProvider {
    dim: usize,
    seed: u64,
    rotation: Vec<f64>,
}

const COLOR_RADIUS: f64 = 45.0;
/// Upper bound of the band fraction; the curve spans half a turn over it at
/// the base frequency.
const BAND_FRACTION_RANGE: f64 = 0.5;

impl FixtureProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 2 && dim % 2 == 0, "fixture dim must be even and >= 2");
        Self {
            dim,
            seed,
            rotation: random_orthogonal(dim, seed),
        }
    }

    /// Band pixels over band-plus-body pixels; 0 when neither color occurs.
    pub fn band_fraction(image: &RgbImage) -> f64 {
        let close = |p: &image::Rgb<u8>, c: [u8; 3]| {
            let d2: f64 = (0..3).map(|i| (p[i] as f64 - c[i] as f64).powi(2)).sum();
            d2 <= COLOR_RADIUS * COLOR_RADIUS
        };
        let (mut band, mut body) = (0usize, 0usize);
        for p in image.pixels() {
            if close(p, STRIPE_COLOR) {
                band += 1;
            } else if close(p, BODY_COLOR) {
                body += 1;
            }
        }
        if band + body == 0 {
            0.0
        } else {
            band as f64 / (band + body) as f64
        }
    }

    /// Unit embedding of a band fraction.
    pub fn embed_fraction(&self, r: f64) -> Vec<f32> {
        let pairs = self.dim / 2;
        let theta = std::f64::consts::PI * r / BAND_FRACTION_RANGE;
        let mut s = Vec::with_capacity(self.dim);
        for j in 0..pairs {
            let f = (j + 1) as f64;
            s.push((f * theta).cos());
            s.push((f * theta).sin());
        }
        let rotated: Vec<f64> = (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.rotation[i * self.dim + j] * s[j]).sum())
            .collect();
        normalized(rotated)
    }
}

/// Gram–Schmidt on a seeded Gaussian matrix, row-major.
fn random_orthogonal(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, &[STREAM_FIXTURE, 0]);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    rows.concat()
}

impl TeacherProvider for FixtureProvider {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn image_embedding(&self, _source_id: usize, image: &RgbImage) -> Result<Vec<f32>> {
        Ok(self.embed_fraction(Self::band_fraction(image)))
    }

    fn text_embedding(&self, text: &str) -> Result<Vec<f32>> {
        let digest = Sha256::digest(text.as_bytes());
        let key = u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
        let mut rng = rng_for(self.seed, &[STREAM_FIXTURE, 1, key]);
        Ok(normalized((0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{render_sample, SyntheticSpec};

    fn cos(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    fn unit(v: &[f32]) -> bool {
        (v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt() - 1.0).abs() < 1e-5
    }

    #[test]
    fn rotation_is_orthogonal() {
        let q = random_orthogonal(6, 4);
        for i in 0..6 {
            for j in 0..6 {
                let d: f64 = (0..6).map(|k| q[i * 6 + k] * q[j * 6 + k]).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fixture_embeddings_are_unit_and_deterministic() {
        let p = FixtureProvider::new(8, 1);
        let (img, _) = render_sample(&SyntheticSpec::default(), 2, 0);
        let a = p.image_embedding(0, &img).unwrap();
        assert!(unit(&a));
        assert_eq!(a, p.image_embedding(99, &img).unwrap());
        let t = p.text_embedding("a bird").unwrap();
        assert!(unit(&t));
        assert_eq!(t, p.text_embedding("a bird").unwrap());
        assert_ne!(t, p.text_embedding("a car").unwrap());
    }

    #[test]
    fn fixture_is_class_informative() {
        // Brute force over all pairs: mean same-class cosine must beat mean
        // cross-class cosine, and every class must be closer to itself than to
        // any other class on average.
        let spec = SyntheticSpec::default();
        let p = FixtureProvider::new(8, 0);
        let per = 6;
        let emb: Vec<(usize, Vec<f32>)> = (0..spec.num_classes)
            .flat_map(|c| (0..per).map(move |i| (c, i)))
            .map(|(c, i)| (c, p.image_embedding(0, &render_sample(&spec, c, i).0).unwrap()))
            .collect();
        let n = spec.num_classes;
        let mut sum = vec![0.0; n * n];
        let mut cnt = vec![0usize; n * n];
        for (i, (ci, ei)) in emb.iter().enumerate() {
            for (j, (cj, ej)) in emb.iter().enumerate() {
                if i != j {
                    sum[ci * n + cj] += cos(ei, ej);
                    cnt[ci * n + cj] += 1;
                }
            }
        }
        let mean = |a: usize, b: usize| sum[a * n + b] / cnt[a * n + b] as f64;
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    assert!(mean(a, a) > mean(a, b), "class {a} vs {b}: {} <= {}", mean(a, a), mean(a, b));
                }
            }
        }
    }

    #[test]
    fn cache_round_trip_and_misses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppse");
        let entries = vec![
            (CacheKey::Image(3), vec![3.0f32, 4.0]),
            (CacheKey::text("a bird"), vec![0.0, 1.0]),
        ];
        write_cache(&path, 2, &entries).unwrap();
        let c = CacheProvider::load(&path).unwrap();
        let img = RgbImage::new(1, 1);
        assert_eq!(c.image_embedding(3, &img).unwrap(), vec![0.6, 0.8]);
        assert_eq!(c.image_embedding(3, &img).unwrap(), c.image_embedding(3, &img).unwrap());
        assert_eq!(c.text_embedding("a bird").unwrap(), vec![0.0, 1.0]);
        assert!(matches!(c.image_embedding(4, &img), Err(Error::MissingEmbedding(_))));
        assert!(matches!(c.text_embedding("a car"), Err(Error::MissingEmbedding(_))));
    }

    #[test]
    fn cache_index_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppse");
        write_cache(&path, 1, &[(CacheKey::Image(0), vec![1.0])]).unwrap();
        fs::write(sidecar_path(&path, "index"), "img\t0\nimg\t1\n").unwrap();
        assert!(matches!(CacheProvider::load(&path), Err(Error::Format(_))));
    }
}
