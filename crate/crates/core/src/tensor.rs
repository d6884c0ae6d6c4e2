//! Small numeric helpers on top of candle tensors.

use candle_core::{DType, Device, Shape, Tensor, D};
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::rng::Rng;

/// Guard used wherever a vector is L2-normalized.
pub const NORM_EPS: f64 = 1e-12;

pub fn device() -> Device {
    Device::Cpu
}

pub fn from_f64(data: Vec<f64>, shape: impl Into<Shape>, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &device())?.to_dtype(dtype)?)
}

pub fn from_f32(data: Vec<f32>, shape: impl Into<Shape>, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &device())?.to_dtype(dtype)?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn to_f32_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

/// Row-wise L2 normalization along the last dimension with `max(‖x‖, ε)` in
/// the denominator.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let norm = norm.clamp(NORM_EPS, f64::INFINITY)?;
    Ok(x.broadcast_div(&norm)?)
}

/// Number of rows whose norm falls under the normalization guard.
pub fn degenerate_rows(x: &Tensor) -> Result<usize> {
    let norms = to_f64_vec(&x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?)?;
    Ok(norms.iter().filter(|&&n| n < NORM_EPS).count())
}

/// Numerically stable log-softmax along `dim`.
pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    Ok(log_softmax(x, dim)?.exp()?)
}

/// He-normal initialization, `std = sqrt(2 / fan_in)`.
pub fn kaiming_normal(
    shape: &[usize],
    fan_in: usize,
    rng: &mut Rng,
    dtype: DType,
) -> Result<Tensor> {
    let std = (2.0 / fan_in as f64).sqrt();
    normal(shape, std, rng, dtype)
}

pub fn normal(shape: &[usize], std: f64, rng: &mut Rng, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    from_f64(data, shape.to_vec(), dtype)
}

pub fn all_finite(t: &Tensor) -> Result<bool> {
    Ok(to_f64_vec(t)?.iter().all(|v| v.is_finite()))
}
