//! InfoNCE over one positive key and a FIFO queue of past keys.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{from_f64, log_softmax, to_f64_vec};

const UNIT_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub queue_capacity: usize,
    /// EMA factor for the momentum tower.
    pub momentum: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            queue_capacity: 65536,
            momentum: 0.999,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self, errs: &mut Vec<String>) {
        if !(self.temperature > 0.0) {
            errs.push(format!("contrastive.temperature must be > 0, got {}", self.temperature));
        }
        if self.queue_capacity == 0 {
            errs.push("contrastive.queue_capacity must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            errs.push(format!("contrastive.momentum must lie in [0, 1], got {}", self.momentum));
        }
    }
}

/// Fixed-capacity ring buffer of unit-norm keys. Rows are kept in f64 so a
/// queue filled from either precision survives checkpoints bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingQueue {
    capacity: usize,
    dim: usize,
    buffer: Vec<f64>,
    write_head: usize,
    fill_count: usize,
}

impl EmbeddingQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::config(format!(
                "queue needs capacity >= 1 and dim >= 1, got {capacity}×{dim}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            buffer: vec![0.0; capacity * dim],
            write_head: 0,
            fill_count: 0,
        })
    }

    pub fn from_parts(capacity: usize, dim: usize, buffer: Vec<f64>, write_head: usize, fill_count: usize) -> Result<Self> {
        if buffer.len() != capacity * dim || write_head >= capacity.max(1) || fill_count > capacity {
            return Err(Error::Structure(format!(
                "queue parts inconsistent: capacity {capacity}, dim {dim}, buffer {}, head {write_head}, fill {fill_count}",
                buffer.len()
            )));
        }
        Ok(Self {
            capacity,
            dim,
            buffer,
            write_head,
            fill_count,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn write_head(&self) -> usize {
        self.write_head
    }

    pub fn fill_count(&self) -> usize {
        self.fill_count
    }

    pub fn buffer(&self) -> &[f64] {
        &self.buffer
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.buffer[i * self.dim..(i + 1) * self.dim]
    }

    /// Stored rows oldest first.
    pub fn rows_fifo(&self) -> Vec<&[f64]> {
        let start = if self.fill_count < self.capacity { 0 } else { self.write_head };
        (0..self.fill_count)
            .map(|i| self.row((start + i) % self.capacity))
            .collect()
    }

    /// Appends a `(B, d)` batch of unit rows, evicting the oldest entries
    /// once full.
    pub fn push(&mut self, keys: &Tensor) -> Result<()> {
        let (b, d) = keys.dims2()?;
        if d != self.dim {
            return Err(Error::Structure(format!("queue dim is {}, keys have dim {d}", self.dim)));
        }
        if b > self.capacity {
            return Err(Error::config(format!(
                "batch of {b} keys exceeds queue capacity {}",
                self.capacity
            )));
        }
        let data = to_f64_vec(keys)?;
        for (i, row) in data.chunks_exact(d).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::Contract(format!("queued key {i} has norm {norm}, expected 1")));
            }
        }
        for row in data.chunks_exact(d) {
            let at = self.write_head * d;
            self.buffer[at..at + d].copy_from_slice(row);
            self.write_head = (self.write_head + 1) % self.capacity;
        }
        self.fill_count = (self.fill_count + b).min(self.capacity);
        Ok(())
    }

    /// The `fill_count` live rows as a `(fill, d)` tensor, in storage order.
    pub fn live_rows(&self, dtype: DType) -> Result<Option<Tensor>> {
        if self.fill_count == 0 {
            return Ok(None);
        }
        let data = self.buffer[..self.fill_count * self.dim].to_vec();
        Ok(Some(from_f64(data, (self.fill_count, self.dim), dtype)?))
    }
}

/// Mean over the batch of `−log softmax(l)[0]` with
/// `l = [q·k_pos, q·n_1, …, q·n_fill] / τ`. `k_pos` is detached.
pub fn info_nce(q: &Tensor, k_pos: &Tensor, queue: &EmbeddingQueue, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::config(format!("contrastive temperature must be > 0, got {temperature}")));
    }
    let k = k_pos.detach();
    if q.dims() != k.dims() {
        return Err(Error::Structure(format!(
            "query {:?} and key {:?} shapes differ",
            q.dims(),
            k.dims()
        )));
    }
    let pos = (q * &k)?.sum_keepdim(1)?;
    let logits = match queue.live_rows(q.dtype())? {
        Some(neg) => Tensor::cat(&[pos, q.matmul(&neg.t()?)?], 1)?,
        None => pos,
    };
    let logits = logits.affine(1.0 / temperature, 0.0)?;
    let logp = log_softmax(&logits, 1)?;
    Ok(logp.narrow(1, 0, 1)?.neg()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::scalar;

    fn t(rows: &[&[f64]]) -> Tensor {
        let d = rows[0].len();
        from_f64(rows.concat(), (rows.len(), d), DType::F64).unwrap()
    }

    fn queue_with(rows: &[&[f64]], cap: usize) -> EmbeddingQueue {
        let mut q = EmbeddingQueue::new(cap, rows[0].len()).unwrap();
        q.push(&t(rows)).unwrap();
        q
    }

    #[test]
    fn aligned_positive_single_negative() {
        let q = t(&[&[1.0, 0.0]]);
        let loss = info_nce(&q, &q, &queue_with(&[&[0.0, 1.0]], 4), 1.0).unwrap();
        assert!((scalar(&loss).unwrap() - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_positive_aligned_negative() {
        let q = t(&[&[1.0, 0.0]]);
        let k = t(&[&[0.0, 1.0]]);
        let loss = info_nce(&q, &k, &queue_with(&[&[1.0, 0.0]], 4), 1.0).unwrap();
        assert!((scalar(&loss).unwrap() - 1.313262).abs() < 1e-6);
    }

    #[test]
    fn empty_queue_gives_zero_loss() {
        let q = t(&[&[0.6, 0.8], &[1.0, 0.0]]);
        let k = t(&[&[0.0, 1.0], &[0.6, -0.8]]);
        let empty = EmbeddingQueue::new(8, 2).unwrap();
        assert_eq!(scalar(&info_nce(&q, &k, &empty, 0.2).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let q = t(&[&[1.0, 0.0]]);
        let empty = EmbeddingQueue::new(1, 2).unwrap();
        assert!(matches!(info_nce(&q, &q, &empty, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn fifo_eviction() {
        let mut q = EmbeddingQueue::new(4, 1).unwrap();
        q.push(&t(&[&[1.0], &[-1.0], &[1.0]])).unwrap();
        q.push(&t(&[&[-1.0], &[-1.0], &[1.0]])).unwrap();
        assert_eq!(q.fill_count(), 4);
        assert_eq!(q.write_head(), 2);
        // Oldest two of the first push are gone; the third survives.
        let fifo: Vec<f64> = q.rows_fifo().iter().map(|r| r[0]).collect();
        assert_eq!(fifo, vec![1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn exact_fill_keeps_order() {
        let rows: [&[f64]; 4] = [&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0], &[0.0, -1.0]];
        let q = queue_with(&rows, 4);
        assert_eq!(q.fill_count(), 4);
        assert_eq!(q.write_head(), 0);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(q.row(i), *r);
        }
    }

    #[test]
    fn push_rejects_non_unit_and_oversized() {
        let mut q = EmbeddingQueue::new(2, 2).unwrap();
        assert!(matches!(q.push(&t(&[&[1.0, 1.0]])), Err(Error::Contract(_))));
        assert_eq!(q.fill_count(), 0);
        assert!(matches!(
            q.push(&t(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]])),
            Err(Error::Config(_))
        ));
    }
}
