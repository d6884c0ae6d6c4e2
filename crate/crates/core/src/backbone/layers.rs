use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{kaiming_normal, normal};

/// A named parameter or buffer. Buffers (batch-norm running statistics) are
/// carried in checkpoints but never touched by the optimizer or EMA.
#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub trainable: bool,
}

pub trait Parameterized {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Param>);

    fn params(&self, prefix: &str) -> Vec<Param> {
        let mut out = Vec::new();
        self.collect_params(prefix, &mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn push(out: &mut Vec<Param>, prefix: &str, name: &str, var: &Var, trainable: bool) {
    out.push(Param {
        name: join(prefix, name),
        var: var.clone(),
        trainable,
    });
}

#[derive(Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut Rng,
        dtype: DType,
    ) -> Result<Self> {
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = Var::from_tensor(&kaiming_normal(&shape, in_channels * kernel * kernel, rng, dtype)?)?;
        let bias = if bias {
            Some(Var::zeros(out_channels, dtype, &crate::tensor::device())?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Wraps explicit weights `(out, in, k, k)`.
    pub fn from_weight(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Result<Self> {
        if weight.rank() != 4 {
            return Err(Error::Structure(format!("conv weight must be rank 4, got {:?}", weight.dims())));
        }
        Ok(Self {
            weight: Var::from_tensor(&weight)?,
            bias: bias.map(|b| Var::from_tensor(&b)).transpose()?,
            stride,
            padding,
        })
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        let d = self.weight.dims();
        (d[2], d[3])
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, b.dims()[0], 1, 1))?)?),
            None => Ok(y),
        }
    }
}

impl Parameterized for Conv2d {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Param>) {
        push(out, prefix, "weight", &self.weight, true);
        if let Some(b) = &self.bias {
            push(out, prefix, "bias", b, true);
        }
    }
}

#[derive(Clone)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, rng: &mut Rng, dtype: DType) -> Result<Self> {
        let weight = Var::from_tensor(&normal(&[out_dim, in_dim], (1.0 / in_dim as f64).sqrt(), rng, dtype)?)?;
        let bias = if bias {
            Some(Var::zeros(out_dim, dtype, &crate::tensor::device())?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.as_tensor().t()?)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(b.as_tensor())?),
            None => Ok(y),
        }
    }
}

impl Parameterized for Linear {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Param>) {
        push(out, prefix, "weight", &self.weight, true);
        if let Some(b) = &self.bias {
            push(out, prefix, "bias", b, true);
        }
    }
}

/// Batch normalization over every axis except the channel axis (dim 1).
/// Inputs may be `(B, C)` or `(B, C, H, W)`.
#[derive(Clone)]
pub struct BatchNorm {
    pub weight: Var,
    pub bias: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize, dtype: DType) -> Result<Self> {
        let dev = crate::tensor::device();
        Ok(Self {
            weight: Var::ones(channels, dtype, &dev)?,
            bias: Var::zeros(channels, dtype, &dev)?,
            running_mean: Var::zeros(channels, dtype, &dev)?,
            running_var: Var::ones(channels, dtype, &dev)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    fn reduce_mean(x: &Tensor) -> Result<Tensor> {
        let mut m = x.mean_keepdim(0)?;
        for d in 2..x.rank() {
            m = m.mean_keepdim(d)?;
        }
        Ok(m)
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dims()[1];
        let mut shape = vec![1; x.rank()];
        shape[1] = c;
        let (mean, var) = if train {
            let mean = Self::reduce_mean(x)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = Self::reduce_mean(&centered.sqr()?)?;
            let n = x.elem_count() / c;
            let unbiased = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = (self.running_mean.as_tensor().affine(1.0 - m, 0.0)?
                + mean.detach().flatten_all()?.affine(m, 0.0)?)?;
            let rv = (self.running_var.as_tensor().affine(1.0 - m, 0.0)?
                + var.detach().flatten_all()?.affine(m * unbiased, 0.0)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(shape.clone())?,
                self.running_var.as_tensor().reshape(shape.clone())?,
            )
        };
        let inv = (var + self.eps)?.sqrt()?.recip()?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&inv)?;
        Ok(y.broadcast_mul(&self.weight.as_tensor().reshape(shape.clone())?)?
            .broadcast_add(&self.bias.as_tensor().reshape(shape)?)?)
    }
}

impl Parameterized for BatchNorm {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Param>) {
        push(out, prefix, "weight", &self.weight, true);
        push(out, prefix, "bias", &self.bias, true);
        push(out, prefix, "running_mean", &self.running_mean, false);
        push(out, prefix, "running_var", &self.running_var, false);
    }
}
