//! Convolutional encoders. `tinycnn` is the desk-scale profile (three
//! stride-2 conv stages); `resnet50` follows the standard bottleneck layout
//! with torchvision parameter names so external weights load by name.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{join, BatchNorm, Conv2d, Param, Parameterized};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Tinycnn,
    Resnet50,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Tinycnn => "tinycnn",
            Profile::Resnet50 => "resnet50",
        })
    }
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tinycnn" => Ok(Profile::Tinycnn),
            "resnet50" => Ok(Profile::Resnet50),
            other => Err(format!("unknown encoder profile `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub profile: Profile,
    /// Base channel width of the tinycnn profile; its feature map has
    /// `4 × width` channels.
    pub width: usize,
    pub bias: bool,
}

impl EncoderSpec {
    pub fn tiny(width: usize, bias: bool) -> Self {
        Self {
            profile: Profile::Tinycnn,
            width,
            bias,
        }
    }

    pub fn feature_channels(&self) -> usize {
        match self.profile {
            Profile::Tinycnn => 4 * self.width,
            Profile::Resnet50 => 2048,
        }
    }

    pub fn num_stages(&self) -> usize {
        match self.profile {
            Profile::Tinycnn => 3,
            Profile::Resnet50 => 4,
        }
    }
}

#[derive(Clone)]
pub struct TinyCnn {
    pub stages: Vec<Conv2d>,
}

impl TinyCnn {
    pub fn new(width: usize, bias: bool, rng: &mut Rng, dtype: DType) -> Result<Self> {
        let chans = [3, width, 2 * width, 4 * width];
        let stages = chans
            .windows(2)
            .map(|w| Conv2d::new(w[0], w[1], 3, 2, 1, bias, rng, dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stages })
    }

    fn forward_stages(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for conv in &self.stages {
            h = conv.forward(&h)?.relu()?;
            outs.push(h.clone());
        }
        Ok(outs)
    }
}

impl Parameterized for TinyCnn {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Param>) {
        for (i, conv) in self.stages.iter().enumerate() {
            conv.collect_params(&join(prefix, &format!("stage{i}")), out);
        }
    }
}

#[derive(Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl Bottleneck {
    fn new(in_c: usize, width: usize, stride: usize, rng: &mut Rng, dtype: DType) -> Result<Self> {
        let out_c = width * 4;
        let downsample = if stride != 1 || in_c != out_c {
            Some((
                Conv2d::new(in_c, out_c, 1, stride, 0, false, rng, dtype)?,
                BatchNorm::new(out_c, dtype)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(in_c, width, 1, 1, 0, false, rng, dtype)?,
            bn1: BatchNorm::new(width, dtype)?,
            conv2: Conv2d::new(width, width, 3, stride, 1, false, rng, dtype)?,
            bn2: BatchNorm::new(width, dtype)?,
            conv3: Conv2d::new(width, out_c, 1, 1, 0, false, rng, dtype)?,
            bn3: BatchNorm::new(out_c, dtype)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?, train)?.relu()?;
        let h = self.bn3.forward(&self.conv3.forward(&h)?, train)?;
        let identity = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok((h + identity)?.relu()?)
    }
}

impl Parameterized for Bottleneck {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Param>) {
        self.conv1.collect_params(&join(prefix, "conv1"), out);
        self.bn1.collect_params(&join(prefix, "bn1"), out);
        self.conv2.collect_params(&join(prefix, "conv2"), out);
        self.bn2.collect_params(&join(prefix, "bn2"), out);
        self.conv3.collect_params(&join(prefix, "conv3"), out);
        self.bn3.collect_params(&join(prefix, "bn3"), out);
        if let Some((conv, bn)) = &self.downsample {
            conv.collect_params(&join(prefix, "downsample.0"), out);
            bn.collect_params(&join(prefix, "downsample.1"), out);
        }
    }
}

#[derive(Clone)]
pub struct ResNet50 {
    conv1: Conv2d,
    bn1: BatchNorm,
    layers: Vec<Vec<Bottleneck>>,
}

impl ResNet50 {
    pub fn new(rng: &mut Rng, dtype: DType) -> Result<Self> {
        let mut in_c = 64;
        let mut layers = Vec::new();
        for (i, (&blocks, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let mut layer = Vec::with_capacity(blocks);
            for b in 0..blocks {
                layer.push(Bottleneck::new(in_c, width, if b == 0 { stride } else { 1 }, rng, dtype)?);
                in_c = width * 4;
            }
            layers.push(layer);
        }
        Ok(Self {
            conv1: Conv2d::new(3, 64, 7, 2, 3, false, rng, dtype)?,
            bn1: BatchNorm::new(64, dtype)?,
            layers,
        })
    }

    fn forward_stages(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        // Post-ReLU activations are non-negative, so zero padding acts as
        // -inf padding for the max pool.
        let mut h = h
            .pad_with_zeros(2, 1, 1)?
            .pad_with_zeros(3, 1, 1)?
            .max_pool2d_with_stride((3, 3), (2, 2))?;
        let mut outs = Vec::with_capacity(4);
        for layer in &self.layers {
            for block in layer {
                h = block.forward(&h, train)?;
            }
            outs.push(h.clone());
        }
        Ok(outs)
    }
}

impl Parameterized for ResNet50 {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Param>) {
        self.conv1.collect_params(&join(prefix, "conv1"), out);
        self.bn1.collect_params(&join(prefix, "bn1"), out);
        for (i, layer) in self.layers.iter().enumerate() {
            for (j, block) in layer.iter().enumerate() {
                block.collect_params(&join(prefix, &format!("layer{}.{j}", i + 1)), out);
            }
        }
    }
}

#[derive(Clone)]
pub enum Encoder {
    Tiny(TinyCnn),
    ResNet50(Box<ResNet50>),
}

/// Last pre-pooling activation and its spatial average.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `(B, C_f, H_f, W_f)`
    pub feature_map: Tensor,
    /// `(B, C_f)`
    pub pooled: Tensor,
}

pub fn spatial_mean(map: &Tensor) -> Result<Tensor> {
    Ok(map.mean(3)?.mean(2)?)
}

impl Encoder {
    pub fn new(spec: &EncoderSpec, rng: &mut Rng, dtype: DType) -> Result<Self> {
        Ok(match spec.profile {
            Profile::Tinycnn => Encoder::Tiny(TinyCnn::new(spec.width, spec.bias, rng, dtype)?),
            Profile::Resnet50 => Encoder::ResNet50(Box::new(ResNet50::new(rng, dtype)?)),
        })
    }

    /// Outputs of every stage; the last one is the feature map.
    pub fn forward_stages(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        if x.rank() != 4 || x.dims()[1] != 3 {
            return Err(Error::Structure(format!(
                "encoder expects a (B, 3, H, W) batch, got {:?}",
                x.dims()
            )));
        }
        match self {
            Encoder::Tiny(m) => m.forward_stages(x),
            Encoder::ResNet50(m) => m.forward_stages(x, train),
        }
    }

    pub fn encode(&self, x: &Tensor, train: bool) -> Result<EncoderOutput> {
        let feature_map = self
            .forward_stages(x, train)?
            .pop()
            .expect("encoders have at least one stage");
        let pooled = spatial_mean(&feature_map)?;
        Ok(EncoderOutput { feature_map, pooled })
    }

    /// Loads weights by parameter name from a safetensors file. Every
    /// encoder parameter must be present with a matching shape.
    pub fn load_pretrained(&self, path: &Path) -> Result<()> {
        let tensors: HashMap<String, Tensor> =
            candle_core::safetensors::load(path, &crate::tensor::device())?;
        for p in self.params("") {
            let src = tensors
                .get(&p.name)
                .ok_or_else(|| Error::Structure(format!("{}: missing tensor `{}`", path.display(), p.name)))?;
            if src.dims() != p.var.dims() {
                return Err(Error::Structure(format!(
                    "{}: `{}` has shape {:?}, expected {:?}",
                    path.display(),
                    p.name,
                    src.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&src.to_dtype(p.var.dtype())?)?;
        }
        Ok(())
    }
}

impl Parameterized for Encoder {
    fn collect_params(&self, prefix: &str, out: &mut Vec<Param>) {
        match self {
            Encoder::Tiny(m) => m.collect_params(prefix, out),
            Encoder::ResNet50(m) => m.collect_params(prefix, out),
        }
    }
}
