//! Input-gradient saliency pseudo-labels and the image attention map that is
//! trained to agree with them.

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::ais::attention_map;
use crate::backbone::layers::join;
use crate::backbone::{Conv2d, Param, Parameterized};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Additive smoothing applied whenever a map becomes a distribution.
pub const MAP_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IadmConfig {
    pub enabled: bool,
    /// Weight of the alignment term in the total loss.
    pub beta: f64,
    /// Output channels of ψ_img before the channel max.
    pub attn_channels: usize,
    /// 0 takes the gradient w.r.t. the input image; k ≥ 1 w.r.t. the output
    /// of encoder stage k, upsampled to the image size.
    pub saliency_layer: usize,
    pub start_step: u64,
}

impl Default for IadmConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            beta: 0.01,
            attn_channels: 8,
            saliency_layer: 0,
            start_step: 0,
        }
    }
}

impl IadmConfig {
    pub fn validate(&self, num_stages: usize, errs: &mut Vec<String>) {
        if !(self.beta >= 0.0) {
            errs.push(format!("iadm.beta must be >= 0, got {}", self.beta));
        }
        if self.attn_channels == 0 {
            errs.push("iadm.attn_channels must be >= 1".into());
        }
        if self.saliency_layer > num_stages {
            errs.push(format!(
                "iadm.saliency_layer must be in 0..={num_stages}, got {}",
                self.saliency_layer
            ));
        }
    }
}

/// Per-sample probability maps `(B, 1, H, W)`, detached from any graph.
#[derive(Debug, Clone)]
pub struct GradCamLabel {
    pub map: Tensor,
    /// Samples whose raw map was identically zero (now uniform).
    pub degenerate: Vec<bool>,
    pub detached: bool,
}

impl GradCamLabel {
    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|d| **d).count()
    }
}

/// ψ_img: 1×1 convolution on the RGB image.
#[derive(Clone)]
pub struct ImageAttentionHead {
    pub psi: Conv2d,
}

impl ImageAttentionHead {
    pub fn new(attn_channels: usize, rng: &mut Rng, dtype: DType) -> Result<Self> {
        Self::from_conv(Conv2d::new(3, attn_channels, 1, 1, 0, false, rng, dtype)?)
    }

    pub fn from_conv(psi: Conv2d) -> Result<Self> {
        if psi.kernel_size() != (1, 1) {
            return Err(Error::Structure(format!(
                "image attention kernel must be 1×1, got {:?}",
                psi.kernel_size()
            )));
        }
        Ok(Self { psi })
    }
}

impl Parameterized for ImageAttentionHead {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Param>) {
        self.psi.collect_params(&join(prefix, "psi"), out);
    }
}

/// Gradient of `loss_fn(x)` w.r.t. `x`. The graph built by `loss_fn` is
/// dropped before returning; the result carries no history.
pub fn input_saliency<F>(x: &Tensor, loss_fn: F) -> Result<Tensor>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    let var = Var::from_tensor(&x.detach())?;
    let loss = loss_fn(var.as_tensor())?;
    let grads = loss.backward()?;
    match grads.get(var.as_tensor()) {
        Some(g) => Ok(g.detach()),
        None => Err(Error::Contract(
            "loss does not depend on the input through a differentiable path".into(),
        )),
    }
}

/// Same as [`input_saliency`] but the gradient is taken w.r.t. an
/// intermediate tensor that `loss_fn` returns alongside the loss.
pub fn activation_saliency<F>(x: &Tensor, loss_fn: F) -> Result<(Tensor, Tensor)>
where
    F: FnOnce(&Tensor) -> Result<(Tensor, Tensor)>,
{
    let var = Var::from_tensor(&x.detach())?;
    let (loss, act) = loss_fn(var.as_tensor())?;
    let grads = loss.backward()?;
    match grads.get(&act) {
        Some(g) => Ok((g.detach(), act.detach())),
        None => Err(Error::Contract(
            "loss does not depend on the chosen activation".into(),
        )),
    }
}

/// `ReLU(grad ⊙ x)`, max over channels, then `(m + ε) / Σ(m + ε)` per
/// sample. Inputs are `(B, C, H, W)`; the label is `(B, 1, H, W)`.
pub fn grad_img(grad: &Tensor, x: &Tensor) -> Result<GradCamLabel> {
    if grad.dims() != x.dims() || grad.rank() != 4 {
        return Err(Error::Structure(format!(
            "gradient {:?} and input {:?} must be equal 4-d shapes",
            grad.dims(),
            x.dims()
        )));
    }
    let raw = (grad.detach() * x.detach())?.relu()?.max_keepdim(1)?;
    label_from_raw(&raw)
}

/// Layer-saliency variant: the channel-reduced map is upsampled (nearest)
/// to `size` before normalization.
pub fn grad_img_upsampled(grad: &Tensor, act: &Tensor, size: (usize, usize)) -> Result<GradCamLabel> {
    if grad.dims() != act.dims() || grad.rank() != 4 {
        return Err(Error::Structure(format!(
            "gradient {:?} and activation {:?} must be equal 4-d shapes",
            grad.dims(),
            act.dims()
        )));
    }
    let raw = (grad.detach() * act.detach())?.relu()?.max_keepdim(1)?;
    label_from_raw(&raw.upsample_nearest2d(size.0, size.1)?)
}

fn label_from_raw(raw: &Tensor) -> Result<GradCamLabel> {
    let b = raw.dims()[0];
    let degenerate = raw
        .flatten_from(1)?
        .max_keepdim(1)?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .into_iter()
        .map(|m| m <= 0.0)
        .collect::<Vec<_>>();
    debug_assert_eq!(degenerate.len(), b);
    Ok(GradCamLabel {
        map: to_distribution(raw)?.detach(),
        degenerate,
        detached: true,
    })
}

/// `(m + ε) / Σ_{h,w}(m + ε)` per sample of a `(B, 1, H, W)` map.
pub fn to_distribution(map: &Tensor) -> Result<Tensor> {
    let b = map.dims()[0];
    let shifted = (map + MAP_EPS)?;
    let total = shifted.flatten_from(1)?.sum_keepdim(1)?.reshape((b, 1, 1, 1))?;
    Ok(shifted.broadcast_div(&total)?)
}

/// w for a batch of images: `(B, 3, H, W) → (B, 1, H, W)` in [0, 1).
pub fn image_attention(x: &Tensor, head: &ImageAttentionHead) -> Result<Tensor> {
    attention_map(&head.psi.forward(x)?)
}

/// `Σ p log(p / q)` with `p` the label and `q` the ε-smoothed normalization
/// of `w`, averaged over the batch. Gradients reach `w` only.
pub fn iadm_loss(label: &GradCamLabel, w: &Tensor) -> Result<Tensor> {
    if !label.detached {
        return Err(Error::Contract("saliency label must be detached".into()));
    }
    if label.map.dims() != w.dims() || w.rank() != 4 {
        return Err(Error::Structure(format!(
            "label {:?} and attention {:?} differ",
            label.map.dims(),
            w.dims()
        )));
    }
    let p = label.map.detach();
    let q = to_distribution(w)?;
    let kl = (&p * (p.log()? - q.log()?)?)?.flatten_from(1)?.sum(1)?;
    Ok(kl.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use crate::tensor::{from_f64, normal, scalar, to_f64_vec};

    fn map(v: &[f64], h: usize, w: usize) -> Tensor {
        from_f64(v.to_vec(), (1, 1, h, w), DType::F64).unwrap()
    }

    fn label(v: &[f64], h: usize, w: usize) -> GradCamLabel {
        GradCamLabel {
            map: map(v, h, w),
            degenerate: vec![false],
            detached: true,
        }
    }

    #[test]
    fn single_positive_product_dominates() {
        let l = grad_img(&map(&[2.0, -1.0], 1, 2), &map(&[3.0, 5.0], 1, 2)).unwrap();
        let m = to_f64_vec(&l.map).unwrap();
        let e = MAP_EPS / (6.0 + 2.0 * MAP_EPS);
        assert!((m[0] - (1.0 - e)).abs() < 1e-15);
        assert!((m[1] - e).abs() < 1e-15);
        assert!(!l.degenerate[0]);
    }

    #[test]
    fn non_positive_products_give_uniform_flagged_label() {
        let g = from_f64(vec![-1.0; 12], (1, 3, 2, 2), DType::F64).unwrap();
        let x = from_f64(vec![0.5; 12], (1, 3, 2, 2), DType::F64).unwrap();
        let l = grad_img(&g, &x).unwrap();
        assert!(l.degenerate[0]);
        assert!(to_f64_vec(&l.map).unwrap().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn equal_gradient_and_input_gives_channel_max_of_squares() {
        let v = vec![1.0, 2.0, 0.0, 3.0, 0.5, 1.0, 2.0, 1.0];
        let x = from_f64(v.clone(), (1, 2, 2, 2), DType::F64).unwrap();
        let m = to_f64_vec(&grad_img(&x, &x).unwrap().map).unwrap();
        let raw: Vec<f64> = (0..4).map(|i| (v[i] * v[i]).max(v[4 + i] * v[4 + i])).collect();
        let total: f64 = raw.iter().map(|r| r + MAP_EPS).sum();
        for i in 0..4 {
            assert!((m[i] - (raw[i] + MAP_EPS) / total).abs() < 1e-15);
        }
    }

    #[test]
    fn labels_sum_to_one() {
        let mut rng = rng_for(3, &[]);
        let g = normal(&[4, 3, 5, 5], 1.0, &mut rng, DType::F64).unwrap();
        let x = normal(&[4, 3, 5, 5], 1.0, &mut rng, DType::F64).unwrap();
        let m = to_f64_vec(&grad_img(&g, &x).unwrap().map).unwrap();
        for s in m.chunks(25) {
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(s.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(matches!(
            grad_img(&map(&[1.0, 2.0], 1, 2), &map(&[1.0, 2.0], 2, 1)),
            Err(Error::Structure(_))
        ));
        assert!(matches!(
            iadm_loss(&label(&[0.5, 0.5], 1, 2), &map(&[0.5, 0.5], 2, 1)),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn undetached_label_rejected() {
        let mut l = label(&[0.5, 0.5], 1, 2);
        l.detached = false;
        assert!(matches!(iadm_loss(&l, &map(&[0.1, 0.2], 1, 2)), Err(Error::Contract(_))));
    }

    #[test]
    fn kl_spot_value() {
        // q = normalize([0.25, 0.75] + ε), which is [0.25, 0.75] to ~1e-8.
        let loss = scalar(&iadm_loss(&label(&[0.5, 0.5], 1, 2), &map(&[0.25, 0.75], 1, 2)).unwrap()).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((loss - expected).abs() < 1e-7);
        assert!((loss - 0.143841).abs() < 1e-5);
    }

    #[test]
    fn identical_maps_give_zero() {
        let w = [0.1, 0.7, 0.3, 0.0];
        let p = to_distribution(&map(&w, 2, 2)).unwrap();
        let l = GradCamLabel {
            map: p,
            degenerate: vec![false],
            detached: true,
        };
        assert!(scalar(&iadm_loss(&l, &map(&w, 2, 2)).unwrap()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn saliency_of_quadratic_and_scaling() {
        let x = from_f64(vec![1.0, -2.0, 0.5, 3.0], (1, 1, 2, 2), DType::F64).unwrap();
        let g = to_f64_vec(&input_saliency(&x, |t| Ok(t.sqr()?.sum_all()?)).unwrap()).unwrap();
        assert_eq!(g, vec![2.0, -4.0, 1.0, 6.0]);
        let g3 = to_f64_vec(&input_saliency(&x, |t| Ok(t.sqr()?.sum_all()?.affine(3.0, 0.0)?)).unwrap()).unwrap();
        assert_eq!(g3, vec![6.0, -12.0, 3.0, 18.0]);
    }

    #[test]
    fn saliency_without_dependence_is_contract_error() {
        let x = map(&[1.0, 2.0], 1, 2);
        let c = map(&[3.0, 4.0], 1, 2);
        let v = Var::from_tensor(&c).unwrap();
        let r = input_saliency(&x, |_| Ok(v.as_tensor().sum_all()?));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn image_attention_peaks_at_hot_pixel() {
        let mut v = vec![0.0; 3 * 9];
        v[4] = 1.0;
        let x = from_f64(v, (1, 3, 3, 3), DType::F64).unwrap();
        let psi = Conv2d::from_weight(from_f64(vec![1.0, 0.0, 0.0], (1, 3, 1, 1), DType::F64).unwrap(), None, 1, 0).unwrap();
        let w = to_f64_vec(&image_attention(&x, &ImageAttentionHead::from_conv(psi).unwrap()).unwrap()).unwrap();
        let argmax = (0..9).max_by(|a, b| w[*a].total_cmp(&w[*b])).unwrap();
        assert_eq!(argmax, 4);
        assert!(w.iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn constant_image_gives_flat_map() {
        // Min and max span all channels, so several channels give a flat but
        // non-zero map; a single channel gives exactly zero.
        let x = from_f64(vec![0.3; 3 * 16], (1, 3, 4, 4), DType::F64).unwrap();
        let head = ImageAttentionHead::new(4, &mut rng_for(1, &[]), DType::F64).unwrap();
        let w = to_f64_vec(&image_attention(&x, &head).unwrap()).unwrap();
        assert!(w.iter().all(|v| *v == w[0] && (0.0..1.0).contains(v)));
        let head = ImageAttentionHead::new(1, &mut rng_for(1, &[]), DType::F64).unwrap();
        let w = to_f64_vec(&image_attention(&x, &head).unwrap()).unwrap();
        assert!(w.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn loss_gradient_reaches_only_psi_img() {
        let mut rng = rng_for(5, &[]);
        let x = normal(&[2, 3, 4, 4], 1.0, &mut rng, DType::F64).unwrap();
        let head = ImageAttentionHead::new(4, &mut rng, DType::F64).unwrap();
        let g = normal(&[2, 3, 4, 4], 1.0, &mut rng, DType::F64).unwrap();
        let l = grad_img(&g, &x).unwrap();
        let other = Var::from_tensor(&x).unwrap();
        let loss = (iadm_loss(&l, &image_attention(&x, &head).unwrap()).unwrap()
            + other.as_tensor().sum_all().unwrap().affine(0.0, 0.0).unwrap().detach())
        .unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(head.psi.weight.as_tensor()).is_some());
        assert!(grads.get(other.as_tensor()).is_none());
    }
}
