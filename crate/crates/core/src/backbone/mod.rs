//! Student encoder, momentum encoder, contrastive projection heads and the
//! EMA update that links the two towers.

pub mod encoder;
pub mod layers;

use candle_core::{DType, Tensor};

pub use encoder::{spatial_mean, Encoder, EncoderOutput, EncoderSpec, Profile};
pub use layers::{BatchNorm, Conv2d, Linear, Param, Parameterized};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::l2_normalize;

/// linear → ReLU → linear → batch norm, then L2 normalization.
#[derive(Clone)]
pub struct ProjectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub bn: BatchNorm,
}

impl ProjectionHead {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut Rng, dtype: DType) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(in_dim, hidden, true, rng, dtype)?,
            fc2: Linear::new(hidden, out_dim, true, rng, dtype)?,
            bn: BatchNorm::new(out_dim, dtype)?,
        })
    }

    /// Pre-normalization output.
    pub fn forward_raw(&self, pooled: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.fc1.forward(pooled)?.relu()?;
        self.bn.forward(&self.fc2.forward(&h)?, train)
    }

    /// Unit-norm embeddings `(B, d_q)`.
    pub fn project(&self, pooled: &Tensor, train: bool) -> Result<Tensor> {
        l2_normalize(&self.forward_raw(pooled, train)?)
    }
}

impl Parameterized for ProjectionHead {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Param>) {
        self.fc1.collect_params(&layers::join(prefix, "fc1"), out);
        self.fc2.collect_params(&layers::join(prefix, "fc2"), out);
        self.bn.collect_params(&layers::join(prefix, "bn"), out);
    }
}

#[derive(Clone)]
pub struct Tower {
    pub encoder: Encoder,
    pub head: ProjectionHead,
}

impl Tower {
    pub fn new(spec: &EncoderSpec, proj_hidden: usize, proj_dim: usize, rng: &mut Rng, dtype: DType) -> Result<Self> {
        let encoder = Encoder::new(spec, rng, dtype)?;
        let head = ProjectionHead::new(spec.feature_channels(), proj_hidden, proj_dim, rng, dtype)?;
        Ok(Self { encoder, head })
    }

    pub fn encode(&self, x: &Tensor, train: bool) -> Result<EncoderOutput> {
        self.encoder.encode(x, train)
    }

    /// Encode and project in one pass.
    pub fn embed(&self, x: &Tensor, train: bool) -> Result<(EncoderOutput, Tensor)> {
        let out = self.encode(x, train)?;
        let q = self.head.project(&out.pooled, train)?;
        Ok((out, q))
    }
}

impl Parameterized for Tower {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Param>) {
        self.encoder.collect_params(&layers::join(prefix, "encoder"), out);
        self.head.collect_params(&layers::join(prefix, "head"), out);
    }
}

/// Student tower f_θ, momentum tower g_θ and the optimizer step count.
#[derive(Clone)]
pub struct ModelState {
    pub spec: EncoderSpec,
    pub student: Tower,
    pub momentum: Tower,
    pub step: u64,
}

impl ModelState {
    pub fn new(spec: &EncoderSpec, proj_hidden: usize, proj_dim: usize, rng: &mut Rng, dtype: DType) -> Result<Self> {
        let student = Tower::new(spec, proj_hidden, proj_dim, rng, dtype)?;
        let momentum = Tower::new(spec, proj_hidden, proj_dim, rng, dtype)?;
        let mut state = Self {
            spec: spec.clone(),
            student,
            momentum,
            step: 0,
        };
        state.init_momentum()?;
        Ok(state)
    }

    pub fn student_params(&self) -> Vec<Param> {
        self.student.params("student")
    }

    pub fn momentum_params(&self) -> Vec<Param> {
        self.momentum.params("momentum")
    }

    /// Value copy of every student tensor (parameters and buffers) into the
    /// momentum tower.
    pub fn init_momentum(&mut self) -> Result<()> {
        let student = self.student_params();
        let momentum = self.momentum_params();
        check_congruent(&student, &momentum)?;
        for (s, m) in student.iter().zip(&momentum) {
            m.var.set(&s.var.as_tensor().copy()?)?;
        }
        Ok(())
    }

    pub fn ema_update(&mut self, m: f64) -> Result<()> {
        ema_update(&self.student_params(), &self.momentum_params(), m)
    }
}

fn strip_tower(name: &str) -> &str {
    name.split_once('.').map(|(_, rest)| rest).unwrap_or(name)
}

pub fn check_congruent(student: &[Param], momentum: &[Param]) -> Result<()> {
    if student.len() != momentum.len() {
        return Err(Error::Structure(format!(
            "student has {} tensors, momentum tower has {}",
            student.len(),
            momentum.len()
        )));
    }
    for (s, m) in student.iter().zip(momentum) {
        if strip_tower(&s.name) != strip_tower(&m.name) || s.var.dims() != m.var.dims() {
            return Err(Error::Structure(format!(
                "`{}` {:?} does not match `{}` {:?}",
                s.name,
                s.var.dims(),
                m.name,
                m.var.dims()
            )));
        }
    }
    Ok(())
}

/// `p_g ← m·p_g + (1 − m)·p_f` for every trainable momentum parameter.
/// Student tensors are read only.
pub fn ema_update(student: &[Param], momentum: &[Param], m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::config(format!("EMA momentum must lie in [0, 1], got {m}")));
    }
    check_congruent(student, momentum)?;
    for (s, g) in student.iter().zip(momentum) {
        if !g.trainable {
            continue;
        }
        let updated = (g.var.as_tensor().affine(m, 0.0)? + s.var.as_tensor().detach().affine(1.0 - m, 0.0)?)?;
        g.var.set(&updated)?;
    }
    Ok(())
}
