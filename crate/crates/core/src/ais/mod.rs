//! Distillation through a shared text-embedding corpus: a learned spatial
//! attention gates the student feature map, the gated features are projected
//! into the teacher's embedding space, and student and teacher are compared
//! through their similarity logits against the frozen text embeddings.

pub mod corpus;
pub mod teacher;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use corpus::{load_descriptions, parse_descriptions, TextCorpus, DEFAULT_CORPUS};
pub use teacher::{
    teacher_image_embedding, CacheKey, CacheProvider, FixtureProvider, TeacherProvider,
};

use crate::backbone::{spatial_mean, Conv2d, Linear, Param, Parameterized};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{l2_normalize, log_softmax};

/// Denominator offset in the min-max normalization of attention maps.
pub const ATTENTION_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Fixture,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AisConfig {
    pub enabled: bool,
    /// Weight of the distillation term in the total loss.
    pub alpha: f64,
    /// Distillation temperature τ_d.
    pub temperature: f64,
    /// Descriptions file; empty selects the built-in corpus.
    pub corpus: String,
    pub teacher: TeacherKind,
    pub teacher_cache: String,
    pub fixture_dim: usize,
    /// ψ output channels; 0 means "same as the feature map".
    pub attn_channels: usize,
    /// First optimizer step at which the term joins the objective.
    pub start_step: u64,
}

impl Default for AisConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha: 1.2,
            temperature: 2.0,
            corpus: String::new(),
            teacher: TeacherKind::Fixture,
            teacher_cache: String::new(),
            fixture_dim: 8,
            attn_channels: 0,
            start_step: 0,
        }
    }
}

impl AisConfig {
    pub fn validate(&self, errs: &mut Vec<String>) {
        if !(self.alpha >= 0.0) {
            errs.push(format!("ais.alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.temperature > 0.0) {
            errs.push(format!("ais.temperature must be > 0, got {}", self.temperature));
        }
        if self.teacher == TeacherKind::Cache && self.teacher_cache.is_empty() {
            errs.push("ais.teacher_cache must name a PPSE file when ais.teacher = \"cache\"".into());
        }
        if self.fixture_dim < 2 || self.fixture_dim % 2 != 0 {
            errs.push(format!("ais.fixture_dim must be even and >= 2, got {}", self.fixture_dim));
        }
    }
}

/// ψ (1×1 convolution, C_f → C_a) and the projector (C_f → d).
#[derive(Clone)]
pub struct AttentionHead {
    pub psi: Conv2d,
    pub projector: Linear,
}

impl AttentionHead {
    pub fn new(feature_channels: usize, attn_channels: usize, embed_dim: usize, rng: &mut Rng, dtype: DType) -> Result<Self> {
        Self::from_parts(
            Conv2d::new(feature_channels, attn_channels, 1, 1, 0, false, rng, dtype)?,
            Linear::new(feature_channels, embed_dim, true, rng, dtype)?,
        )
    }

    pub fn from_parts(psi: Conv2d, projector: Linear) -> Result<Self> {
        if psi.kernel_size() != (1, 1) {
            return Err(Error::Structure(format!(
                "attention kernel must be 1×1, got {:?}",
                psi.kernel_size()
            )));
        }
        Ok(Self { psi, projector })
    }
}

impl Parameterized for AttentionHead {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Param>) {
        self.psi.collect_params(&crate::backbone::layers::join(prefix, "psi"), out);
        self.projector
            .collect_params(&crate::backbone::layers::join(prefix, "projector"), out);
    }
}

/// `max_c((relu(a) − min) / (1e-7 + max))` with min and max taken over every
/// entry of each sample's post-ReLU tensor. `(B, C, H, W) → (B, 1, H, W)`,
/// values in [0, 1).
pub fn attention_map(pre: &Tensor) -> Result<Tensor> {
    let (b, _, _, _) = pre.dims4()?;
    let a = pre.relu()?;
    let flat = a.flatten_from(1)?;
    let min = flat.min_keepdim(1)?.reshape((b, 1, 1, 1))?;
    let max = flat.max_keepdim(1)?.reshape((b, 1, 1, 1))?;
    let normed = a.broadcast_sub(&min)?.broadcast_div(&(max + ATTENTION_EPS)?)?;
    Ok(normed.max_keepdim(1)?)
}

/// z′ for a batch of feature maps.
pub fn spatial_attention(feature_map: &Tensor, psi: &Conv2d) -> Result<Tensor> {
    attention_map(&psi.forward(feature_map)?)
}

/// Gates the feature map with z′ (shared across channels), average-pools
/// and projects: `(B, d)` unit rows.
pub fn student_semantic_embedding(feature_map: &Tensor, z: &Tensor, projector: &Linear) -> Result<Tensor> {
    let gated = feature_map.broadcast_mul(z)?;
    l2_normalize(&projector.forward(&spatial_mean(&gated)?)?)
}

/// `l = u Tᵀ`, `(B, d) × (N, d) → (B, N)`.
pub fn semantic_logits(u: &Tensor, text: &Tensor) -> Result<Tensor> {
    let (_, d) = u.dims2()?;
    let (_, td) = text.dims2()?;
    if d != td {
        return Err(Error::Structure(format!(
            "embedding dim {d} does not match text embedding dim {td}"
        )));
    }
    Ok(u.matmul(&text.t()?)?)
}

/// `τ² · KL(softmax(l_t/τ) ‖ softmax(l_s/τ))`, averaged over the batch.
/// Teacher logits are detached.
pub fn ais_loss(teacher_logits: &Tensor, student_logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::config(format!("distillation temperature must be > 0, got {temperature}")));
    }
    if teacher_logits.dims() != student_logits.dims() {
        return Err(Error::Structure(format!(
            "teacher logits {:?} and student logits {:?} differ",
            teacher_logits.dims(),
            student_logits.dims()
        )));
    }
    let inv = 1.0 / temperature;
    let logp = log_softmax(&teacher_logits.detach().affine(inv, 0.0)?, 1)?;
    let logq = log_softmax(&student_logits.affine(inv, 0.0)?, 1)?;
    let kl = (logp.exp()? * (logp - logq)?)?.sum(1)?.mean_all()?;
    Ok(kl.affine(temperature * temperature, 0.0)?)
}
