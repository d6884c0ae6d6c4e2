//! Checkpoint container: `PPCK`, u32 version, u64 header length, a JSON
//! header, then the raw little-endian payload of every tensor, the queue
//! buffer and the optimizer buffers in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::Model;
use super::optim::Sgd;
use crate::backbone::Param;
use crate::contrastive::EmbeddingQueue;
use crate::error::{Error, Result};
use crate::tensor::device;

pub const MAGIC: &[u8; 4] = b"PPCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    profile: String,
    width: usize,
    teacher_dim: usize,
    /// Completed epochs.
    epoch: usize,
    step: u64,
    config: String,
    tensors: Vec<Entry>,
    queue_capacity: usize,
    queue_dim: usize,
    queue_write_head: usize,
    queue_fill_count: usize,
    sgd_momentum: f64,
    sgd_weight_decay: f64,
    sgd_buffers: Vec<Entry>,
}

/// Everything needed to continue a run.
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub model: Model,
    pub queue: EmbeddingQueue,
    pub optimizer: Sgd,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Format(format!("unsupported tensor dtype {other:?}"))),
    }
}

fn append_tensor(out: &mut Vec<u8>, t: &Tensor) -> Result<Entry> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        _ => {}
    }
    Ok(Entry {
        name: String::new(),
        dtype: dtype_name(t.dtype())?.into(),
        shape: t.dims().to_vec(),
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format("checkpoint payload is truncated".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn tensor(&mut self, e: &Entry) -> Result<Tensor> {
        let n: usize = e.shape.iter().product();
        let dev = device();
        Ok(match e.dtype.as_str() {
            "f32" => {
                let v = self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect::<Vec<_>>();
                Tensor::from_vec(v, e.shape.clone(), &dev)?
            }
            "f64" => Tensor::from_vec(self.f64s(n)?, e.shape.clone(), &dev)?,
            other => return Err(Error::Format(format!("unknown dtype `{other}` for `{}`", e.name))),
        })
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn checkpoint_bytes(
    cfg: &TrainConfig,
    epoch: usize,
    model: &Model,
    queue: &EmbeddingQueue,
    optimizer: &Sgd,
) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for p in model.all_params() {
        let mut e = append_tensor(&mut payload, p.var.as_tensor())?;
        e.name = p.name;
        tensors.push(e);
    }
    queue.buffer().iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes()));
    let mut sgd_buffers = Vec::new();
    for (name, t) in &optimizer.buffers {
        let mut e = append_tensor(&mut payload, t)?;
        e.name = name.clone();
        sgd_buffers.push(e);
    }
    let header = Header {
        profile: model.state.spec.profile.to_string(),
        width: model.state.spec.width,
        teacher_dim: model.ais.projector.weight.dims()[0],
        epoch,
        step: model.state.step,
        config: cfg.to_toml(),
        tensors,
        queue_capacity: queue.capacity(),
        queue_dim: queue.dim(),
        queue_write_head: queue.write_head(),
        queue_fill_count: queue.fill_count(),
        sgd_momentum: optimizer.momentum,
        sgd_weight_decay: optimizer.weight_decay,
        sgd_buffers,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    cfg: &TrainConfig,
    epoch: usize,
    model: &Model,
    queue: &EmbeddingQueue,
    optimizer: &Sgd,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(cfg, epoch, model, queue, optimizer)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.config, self.epoch, &self.model, &self.queue, &self.optimizer)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint_bytes(&self.config, self.epoch, &self.model, &self.queue, &self.optimizer)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, None)
    }

    /// Loads against an expected configuration: the stored architecture must
    /// match it exactly.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &TrainConfig) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, Some(expected))
    }

    pub fn from_bytes(bytes: &[u8], expected: Option<&TrainConfig>) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hend = 16usize
            .checked_add(hlen)
            .filter(|e| *e <= bytes.len())
            .ok_or_else(|| Error::Format("checkpoint header is truncated".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..hend]).map_err(|e| Error::Format(e.to_string()))?;
        let stored = TrainConfig::from_toml_str(&header.config)?;
        if let Some(exp) = expected {
            let (a, b) = (&exp.model, &stored.model);
            if a.profile != b.profile
                || (a.profile == crate::backbone::Profile::Tinycnn && a.width != b.width)
                || a.proj_hidden != b.proj_hidden
                || a.proj_dim != b.proj_dim
                || a.precision != b.precision
            {
                return Err(Error::Structure(format!(
                    "checkpoint holds a {} (width {}) model, configuration asks for {} (width {})",
                    b.profile, b.width, a.profile, a.width
                )));
            }
        }
        let model = Model::new(&stored, header.teacher_dim)?;
        let mut r = Reader { bytes, at: hend };
        let params: Vec<Param> = model.all_params();
        if params.len() != header.tensors.len() {
            return Err(Error::Structure(format!(
                "checkpoint has {} tensors, model has {}",
                header.tensors.len(),
                params.len()
            )));
        }
        for (p, e) in params.iter().zip(&header.tensors) {
            if p.name != e.name || p.var.dims() != e.shape.as_slice() {
                return Err(Error::Structure(format!(
                    "checkpoint tensor `{}` {:?} does not match model tensor `{}` {:?}",
                    e.name,
                    e.shape,
                    p.name,
                    p.var.dims()
                )));
            }
            p.var.set(&r.tensor(e)?)?;
        }
        let mut model = model;
        model.state.step = header.step;
        let qbuf = r.f64s(header.queue_capacity * header.queue_dim)?;
        let queue = EmbeddingQueue::from_parts(
            header.queue_capacity,
            header.queue_dim,
            qbuf,
            header.queue_write_head,
            header.queue_fill_count,
        )?;
        let mut optimizer = Sgd::new(header.sgd_momentum, header.sgd_weight_decay);
        let mut buffers = BTreeMap::new();
        for e in &header.sgd_buffers {
            buffers.insert(e.name.clone(), r.tensor(e)?);
        }
        optimizer.buffers = buffers;
        if r.at != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(Self {
            config: stored,
            epoch: header.epoch,
            model,
            queue,
            optimizer,
        })
    }
}
