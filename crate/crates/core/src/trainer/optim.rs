//! SGD with momentum and L2 weight decay, following the PyTorch update rule.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::backbone::Param;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Momentum buffers by parameter name.
    pub buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    /// `d = g + wd·p; b = μ·b + d (b = d on first use); p ← p − lr·b`.
    /// Parameters without a gradient, and buffers, are left untouched.
    pub fn step(&mut self, params: &[Param], grads: &GradStore, lr: f64) -> Result<()> {
        for p in params.iter().filter(|p| p.trainable) {
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            let w = p.var.as_tensor().detach();
            let mut d = g.detach();
            if self.weight_decay != 0.0 {
                d = (d + w.affine(self.weight_decay, 0.0)?)?;
            }
            let buf = match self.buffers.get(&p.name) {
                Some(b) if self.momentum != 0.0 => (b.affine(self.momentum, 0.0)? + d)?,
                _ => d,
            };
            p.var.set(&(w - buf.affine(lr, 0.0)?)?)?;
            self.buffers.insert(p.name.clone(), buf);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{from_f64, to_f64_vec};
    use candle_core::{DType, Var};

    #[test]
    fn matches_hand_rolled_momentum_sgd() {
        let var = Var::from_tensor(&from_f64(vec![1.0, -2.0], 2, DType::F64).unwrap()).unwrap();
        let frozen = Var::from_tensor(&from_f64(vec![5.0], 1, DType::F64).unwrap()).unwrap();
        let params = vec![
            Param { name: "w".into(), var: var.clone(), trainable: true },
            Param { name: "f".into(), var: frozen.clone(), trainable: true },
        ];
        let mut opt = Sgd::new(0.9, 0.1);
        let (mut w, mut b) = ([1.0f64, -2.0], [0.0f64; 2]);
        for step in 0..3 {
            let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&params, &grads, 0.05).unwrap();
            for i in 0..2 {
                let d = 2.0 * w[i] + 0.1 * w[i];
                b[i] = if step == 0 { d } else { 0.9 * b[i] + d };
                w[i] -= 0.05 * b[i];
            }
            let got = to_f64_vec(var.as_tensor()).unwrap();
            for i in 0..2 {
                assert!((got[i] - w[i]).abs() < 1e-15);
            }
        }
        assert_eq!(to_f64_vec(frozen.as_tensor()).unwrap(), vec![5.0]);
        assert!(!opt.buffers.contains_key("f"));
    }
}
