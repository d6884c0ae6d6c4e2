//! Inference features, test-vs-test retrieval metrics and linear probing.

use std::path::Path;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::ais::spatial_attention;
use crate::backbone::{spatial_mean, Conv2d, Tower};
use crate::data::{test_transform, AugPolicy, Manifest, Split};
use crate::embfile::{read_labels, sidecar_path, write_labels, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::rng::{rng_for, STREAM_PROBE};
use crate::tensor::{l2_normalize, to_f64_vec};

const UNIT_TOL: f64 = 1e-5;

/// `normalize(avgpool(z′ ⊙ f(x)))` for a `(B, 3, H, W)` batch, using the
/// student encoder in inference mode. Returns `(B, C_f)`.
pub fn inference_feature(student: &Tower, psi: &Conv2d, x: &Tensor) -> Result<Tensor> {
    let fm = student.encode(x, false)?.feature_map;
    let z = spatial_attention(&fm, psi)?;
    l2_normalize(&spatial_mean(&fm.broadcast_mul(&z)?)?)
}

/// Row-major features with aligned labels and source ids. Rows are unit
/// norm, or exactly zero when the attention gate vanished for that image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

impl FeatureSet {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<usize>, ids: Vec<usize>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() || ids.len() != labels.len() {
            return Err(Error::Structure(format!(
                "{} values, {} labels and {} ids do not form a dim-{dim} feature set",
                features.len(),
                labels.len(),
                ids.len()
            )));
        }
        for (i, row) in features.chunks_exact(dim).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL && n != 0.0 {
                return Err(Error::Contract(format!("feature row {i} has norm {n}")));
            }
        }
        Ok(Self { dim, features, labels, ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn zero_rows(&self) -> usize {
        self.features.chunks_exact(self.dim).filter(|r| r.iter().all(|v| *v == 0.0)).count()
    }

    /// Writes the PPSE file and its `.labels` sidecar.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let data = self.features.iter().map(|v| *v as f32).collect();
        EmbeddingMatrix::new(self.dim, data)?.write(path)?;
        write_labels(sidecar_path(path, "labels"), &self.ids, &self.labels)
    }

    /// Reads a PPSE file with labels from `labels` (default: the sidecar).
    pub fn read(path: impl AsRef<Path>, labels: Option<&Path>) -> Result<Self> {
        let path = path.as_ref();
        let m = EmbeddingMatrix::read(path)?;
        let lpath = labels.map_or_else(|| sidecar_path(path, "labels"), Path::to_path_buf);
        let (ids, labels) = read_labels(&lpath)?;
        if labels.len() != m.count() {
            return Err(Error::Format(format!(
                "{} has {} rows but {} lists {} labels",
                path.display(),
                m.count(),
                lpath.display(),
                labels.len()
            )));
        }
        Self::new(m.dim, m.data.iter().map(|v| *v as f64).collect(), labels, ids)
    }
}

/// Applies the test transform and inference features to every record of
/// `split`, in manifest order.
pub fn embed_dataset(
    student: &Tower,
    psi: &Conv2d,
    manifest: &Manifest,
    split: Split,
    policy: &AugPolicy,
    batch_size: usize,
) -> Result<FeatureSet> {
    let records = manifest.split(split);
    let dtype = psi.weight.dtype();
    let mut features = Vec::with_capacity(records.len() * 8);
    let mut dim = 0;
    for chunk in records.chunks(batch_size.max(1)) {
        let xs = chunk
            .par_iter()
            .map(|r| test_transform(r, policy))
            .collect::<Result<Vec<_>>>()?;
        let x = Tensor::stack(&xs, 0)?.to_dtype(dtype)?;
        let v = inference_feature(student, psi, &x)?;
        dim = v.dims()[1];
        features.extend(to_f64_vec(&v)?);
    }
    FeatureSet::new(
        dim.max(1),
        features,
        records.iter().map(|r| r.label).collect(),
        records.iter().map(|r| r.source_id).collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    /// Percentages.
    pub rank1: f64,
    pub rank5: f64,
    pub map: f64,
    /// Fractions in [0, 1], one per query.
    pub per_query_ap: Vec<f64>,
    /// Queries whose class has no other member; scored AP 0.
    pub no_positive: Vec<usize>,
}

impl RetrievalReport {
    pub fn to_text(&self) -> String {
        format!(
            "rank1 {:.2}\nrank5 {:.2}\nmAP {:.2}\nqueries {}\nno_positive {}\n",
            self.rank1,
            self.rank5,
            self.map,
            self.per_query_ap.len(),
            self.no_positive.len()
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "rank1": self.rank1,
            "rank5": self.rank5,
            "map": self.map,
            "queries": self.per_query_ap.len(),
            "no_positive": self.no_positive,
        })
    }
}

/// Gallery indices for query `q`, by decreasing cosine similarity with ties
/// broken by index.
pub fn ranked_gallery(fs: &FeatureSet, q: usize) -> Vec<usize> {
    let qr = fs.row(q);
    let mut scored: Vec<(f64, usize)> = (0..fs.len())
        .filter(|&j| j != q)
        .map(|j| (qr.iter().zip(fs.row(j)).map(|(a, b)| a * b).sum(), j))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, j)| j).collect()
}

/// Non-interpolated average precision of a relevance list.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let total = relevant.iter().filter(|r| **r).count();
    if total == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, r) in relevant.iter().enumerate() {
        if *r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / total as f64
}

/// Every item queries all others.
pub fn retrieval_eval(fs: &FeatureSet) -> Result<RetrievalReport> {
    let m = fs.len();
    if m < 2 {
        return Err(Error::Contract(format!("retrieval needs at least 2 items, got {m}")));
    }
    let first = fs.labels[0];
    if fs.labels.iter().all(|l| *l == first) {
        return Err(Error::Contract("retrieval needs at least 2 classes".into()));
    }
    let per_query: Vec<(bool, bool, f64, bool)> = (0..m)
        .into_par_iter()
        .map(|q| {
            let rel: Vec<bool> = ranked_gallery(fs, q)
                .into_iter()
                .map(|j| fs.labels[j] == fs.labels[q])
                .collect();
            let top = |k: usize| rel.iter().take(k).any(|r| *r);
            (top(1), top(5), average_precision(&rel), !rel.iter().any(|r| *r))
        })
        .collect();
    let pct = |n: usize| 100.0 * n as f64 / m as f64;
    let per_query_ap: Vec<f64> = per_query.iter().map(|p| p.2).collect();
    Ok(RetrievalReport {
        rank1: pct(per_query.iter().filter(|p| p.0).count()),
        rank5: pct(per_query.iter().filter(|p| p.1).count()),
        map: 100.0 * per_query_ap.iter().sum::<f64>() / m as f64,
        no_positive: (0..m).filter(|&q| per_query[q].3).collect(),
        per_query_ap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub fraction: f64,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReport {
    /// Percentages.
    pub top1: f64,
    pub top5: f64,
    pub train_samples: usize,
}

/// Per-class seeded subsample keeping `floor(n_c · fraction)` items of each
/// class. Returns indices into `labels`, sorted.
pub fn stratified_subsample(labels: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut keep = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        let n = (idx.len() as f64 * fraction).floor() as usize;
        if n == 0 {
            return Err(Error::config(format!(
                "label fraction {fraction} leaves class {c} ({} samples) with no training sample",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng_for(seed, &[STREAM_PROBE, c as u64]));
        keep.extend_from_slice(&idx[..n]);
    }
    keep.sort_unstable();
    Ok(keep)
}

/// Softmax regression on frozen features trained by full-batch gradient
/// descent at a constant rate.
pub fn linear_probe(train: &FeatureSet, test: &FeatureSet, cfg: &ProbeConfig) -> Result<ProbeReport> {
    if train.dim != test.dim {
        return Err(Error::Structure(format!("train dim {} vs test dim {}", train.dim, test.dim)));
    }
    if test.is_empty() {
        return Err(Error::Contract("linear probe needs test samples".into()));
    }
    let keep = stratified_subsample(&train.labels, cfg.fraction, cfg.seed)?;
    let d = train.dim;
    let c = train.labels.iter().chain(&test.labels).max().map_or(1, |m| m + 1);
    let mut w = vec![0.0f64; c * d];
    let mut b = vec![0.0f64; c];
    let n = keep.len() as f64;
    let mut probs = vec![0.0f64; c];
    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0f64; c * d];
        let mut gb = vec![0.0f64; c];
        for &i in &keep {
            let x = train.row(i);
            softmax_into(&w, &b, x, &mut probs);
            probs[train.labels[i]] -= 1.0;
            for k in 0..c {
                gb[k] += probs[k];
                for j in 0..d {
                    gw[k * d + j] += probs[k] * x[j];
                }
            }
        }
        w.iter_mut().zip(&gw).for_each(|(p, g)| *p -= cfg.lr * g / n);
        b.iter_mut().zip(&gb).for_each(|(p, g)| *p -= cfg.lr * g / n);
    }
    let topk = 5.min(c);
    let (mut hit1, mut hit5) = (0usize, 0usize);
    for i in 0..test.len() {
        let x = test.row(i);
        let scores: Vec<f64> = (0..c)
            .map(|k| b[k] + (0..d).map(|j| w[k * d + j] * x[j]).sum::<f64>())
            .collect();
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|a, bb| scores[*bb].total_cmp(&scores[*a]).then(a.cmp(bb)));
        let y = test.labels[i];
        hit1 += (order[0] == y) as usize;
        hit5 += order[..topk].contains(&y) as usize;
    }
    let m = test.len() as f64;
    Ok(ProbeReport {
        top1: 100.0 * hit1 as f64 / m,
        top5: 100.0 * hit5 as f64 / m,
        train_samples: keep.len(),
    })
}

fn softmax_into(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (k, o) in out.iter_mut().enumerate() {
        *o = b[k] + (0..d).map(|j| w[k * d + j] * x[j]).sum::<f64>();
    }
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}
