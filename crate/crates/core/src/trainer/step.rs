//! One optimization step: contrastive loss, distillation, saliency
//! alignment, joint SGD update, EMA and queue push.

use candle_core::{Tensor, Var};

use super::config::TrainConfig;
use super::model::Model;
use super::optim::Sgd;
use crate::ais::{ais_loss, semantic_logits, spatial_attention, student_semantic_embedding};
use crate::backbone::Param;
use crate::contrastive::{info_nce, EmbeddingQueue};
use crate::data::ViewPair;
use crate::error::{Error, Result};
use crate::iadm::{activation_saliency, grad_img, grad_img_upsampled, iadm_loss, image_attention, input_saliency, GradCamLabel};
use crate::tensor::scalar;

/// A batch stacked into `(B, 3, H, W)` tensors in the model dtype, with the
/// matching teacher embeddings `(B, d)`.
pub struct Batch {
    pub x: Tensor,
    pub x_prime: Tensor,
    pub original: Tensor,
    pub teacher: Tensor,
}

impl Batch {
    pub fn stack(views: &[ViewPair], teacher: Tensor, model: &Model) -> Result<Self> {
        let dtype = model.dtype();
        let stack = |f: fn(&ViewPair) -> &Tensor| -> Result<Tensor> {
            let ts: Vec<&Tensor> = views.iter().map(f).collect();
            Ok(Tensor::stack(&ts, 0)?.to_dtype(dtype)?)
        };
        Ok(Self {
            x: stack(|v| &v.x)?,
            x_prime: stack(|v| &v.x_prime)?,
            original: stack(|v| &v.original)?,
            teacher: teacher.to_dtype(dtype)?,
        })
    }

    pub fn len(&self) -> usize {
        self.x.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss terms of one step; `total` carries the graph.
pub struct Losses {
    pub l_cl: Tensor,
    pub l_ais: Option<Tensor>,
    pub l_iadm: Option<Tensor>,
    pub total: Tensor,
    pub label: Option<GradCamLabel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub l_cl: f64,
    pub l_ais: f64,
    pub l_iadm: f64,
    pub total: f64,
    pub lr: f64,
    pub degenerate_labels: usize,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,l_cl,l_ais,l_iadm,lr";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.l_cl, self.l_ais, self.l_iadm, self.lr)
    }
}

/// Momentum-tower keys for `x′`, detached.
pub fn compute_keys(model: &Model, x_prime: &Tensor) -> Result<Tensor> {
    let (_, k) = model.state.momentum.embed(&x_prime.detach(), true)?;
    Ok(k.detach())
}

/// Runs `f` and restores every non-trainable tensor (batch-norm running
/// statistics) it touched.
fn preserving_buffers<T>(params: &[Param], f: impl FnOnce() -> Result<T>) -> Result<T> {
    let saved: Vec<(Var, Tensor)> = params
        .iter()
        .filter(|p| !p.trainable)
        .map(|p| (p.var.clone(), p.var.as_tensor().copy()))
        .map(|(v, t)| t.map(|t| (v, t)))
        .collect::<std::result::Result<_, _>>()?;
    let out = f();
    for (v, t) in saved {
        v.set(&t)?;
    }
    out
}

/// Saliency label for the original images: gradient of the contrastive loss
/// (with `k` and the queue fixed) w.r.t. the input, or w.r.t. the output of
/// encoder stage `layer` when `layer ≥ 1`.
pub fn saliency_label(
    model: &Model,
    original: &Tensor,
    k: &Tensor,
    queue: &EmbeddingQueue,
    cfg: &TrainConfig,
) -> Result<GradCamLabel> {
    let student = &model.state.student;
    let tau = cfg.contrastive.temperature;
    let layer = cfg.iadm.saliency_layer;
    preserving_buffers(&model.state.student_params(), || {
        if layer == 0 {
            let grad = input_saliency(original, |x| {
                let (_, q) = student.embed(x, true)?;
                info_nce(&q, k, queue, tau)
            })?;
            grad_img(&grad, original)
        } else {
            let (grad, act) = activation_saliency(original, |x| {
                let stages = student.encoder.forward_stages(x, true)?;
                let act = stages[layer - 1].clone();
                let pooled = crate::backbone::spatial_mean(stages.last().expect("non-empty"))?;
                let q = student.head.project(&pooled, true)?;
                Ok((info_nce(&q, k, queue, tau)?, act))
            })?;
            let (_, _, h, w) = original.dims4()?;
            grad_img_upsampled(&grad, &act, (h, w))
        }
    })
}

fn ensure_finite(term: &'static str, t: &Tensor, step: u64) -> Result<f64> {
    let v = scalar(t)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term, step, value: v })
    }
}

/// Whether the distillation and alignment terms are active at `step`.
pub fn active_terms(cfg: &TrainConfig, step: u64) -> (bool, bool) {
    (
        cfg.ais.enabled && step >= cfg.ais.start_step,
        cfg.iadm.enabled && step >= cfg.iadm.start_step,
    )
}

/// Forward pass of every enabled term. With `frozen_label` the saliency
/// side pass is skipped and the given label is used instead.
pub fn compute_losses(
    model: &Model,
    batch: &Batch,
    k: &Tensor,
    queue: &EmbeddingQueue,
    text: &Tensor,
    cfg: &TrainConfig,
    step: u64,
    frozen_label: Option<&GradCamLabel>,
) -> Result<Losses> {
    let (use_ais, use_iadm) = active_terms(cfg, step);
    let student = &model.state.student;
    let out = student.encode(&batch.x, true)?;
    let q = student.head.project(&out.pooled, true)?;
    let l_cl = info_nce(&q, k, queue, cfg.contrastive.temperature)?;
    ensure_finite("l_cl", &l_cl, step)?;
    let mut total = l_cl.clone();

    let l_ais = if use_ais {
        let z = spatial_attention(&out.feature_map, &model.ais.psi)?;
        let u_s = student_semantic_embedding(&out.feature_map, &z, &model.ais.projector)?;
        let l_s = semantic_logits(&u_s, text)?;
        let l_t = semantic_logits(&batch.teacher, text)?;
        let l = ais_loss(&l_t, &l_s, cfg.ais.temperature)?;
        ensure_finite("l_ais", &l, step)?;
        total = (total + l.affine(cfg.ais.alpha, 0.0)?)?;
        Some(l)
    } else {
        None
    };

    let (l_iadm, label) = if use_iadm {
        let label = match frozen_label {
            Some(l) => l.clone(),
            None => saliency_label(model, &batch.original, k, queue, cfg)?,
        };
        let w = image_attention(&batch.original.detach(), &model.iadm)?;
        let l = iadm_loss(&label, &w)?;
        ensure_finite("l_iadm", &l, step)?;
        total = (total + l.affine(cfg.iadm.beta, 0.0)?)?;
        (Some(l), Some(label))
    } else {
        (None, None)
    };
    ensure_finite("total", &total, step)?;
    Ok(Losses { l_cl, l_ais, l_iadm, total, label })
}

/// `L_CL + α·L_AIS + β·L_IADM` on plain numbers, with the offending term
/// named when one is not finite.
pub fn total_loss(l_cl: f64, l_ais: f64, l_iadm: f64, alpha: f64, beta: f64) -> Result<f64> {
    for (term, v) in [("l_cl", l_cl), ("l_ais", l_ais), ("l_iadm", l_iadm)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term, step: 0, value: v });
        }
    }
    Ok(l_cl + alpha * l_ais + beta * l_iadm)
}

/// Mutable training state threaded through steps.
pub struct Trainer {
    pub model: Model,
    pub queue: EmbeddingQueue,
    pub optimizer: Sgd,
    pub text: Tensor,
}

impl Trainer {
    pub fn step(&mut self, batch: &Batch, cfg: &TrainConfig, lr: f64) -> Result<StepMetrics> {
        let step = self.model.state.step;
        let k = compute_keys(&self.model, &batch.x_prime)?;
        let losses = compute_losses(&self.model, batch, &k, &self.queue, &self.text, cfg, step, None)?;
        let grads = losses.total.backward()?;
        self.optimizer.step(&self.model.trainable_params(), &grads, lr)?;
        drop(grads);
        for p in self.model.trainable_params() {
            if !crate::tensor::all_finite(p.var.as_tensor())? {
                return Err(Error::NonFinite { term: "parameters", step, value: f64::NAN });
            }
        }
        self.model.state.ema_update(cfg.contrastive.momentum)?;
        self.queue.push(&k)?;
        self.model.state.step += 1;
        Ok(StepMetrics {
            step,
            l_cl: scalar(&losses.l_cl)?,
            l_ais: losses.l_ais.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
            l_iadm: losses.l_iadm.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
            total: scalar(&losses.total)?,
            lr,
            degenerate_labels: losses.label.as_ref().map_or(0, |l| l.degenerate_count()),
        })
    }
}
