//! SGD-with-momentum and AdamW, keyed by parameter path.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }

    pub fn adamw() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
enum State {
    Sgd { velocity: Vec<f64> },
    AdamW { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

/// Per-path optimizer state; `step` applies one update to one parameter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub wd: f64,
    state: IndexMap<String, State>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, wd: f64) -> Self {
        Optimizer {
            kind,
            lr,
            wd,
            state: IndexMap::new(),
        }
    }

    /// Bytes held by moment/velocity buffers.
    pub fn state_bytes(&self) -> usize {
        self.state
            .values()
            .map(|s| match s {
                State::Sgd { velocity } => velocity.len() * 8,
                State::AdamW { m, v, .. } => (m.len() + v.len()) * 8,
            })
            .sum()
    }

    /// SGD: `v ← μv + g; p ← p − lr(v + wd·p)`.
    /// AdamW: bias-corrected moments with decoupled weight decay.
    /// A non-finite gradient is a divergence signal, reported as an error.
    pub fn step(&mut self, path: &str, param: &mut Tensor, grad: &[f64]) -> Result<()> {
        if param.numel() != grad.len() {
            return Err(Error::InvalidInput(format!(
                "gradient length {} does not match parameter {} ({})",
                grad.len(),
                param.numel(),
                path
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite gradient at {path}"
            )));
        }
        let (lr, wd) = (self.lr, self.wd);
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                let state = self
                    .state
                    .entry(path.to_string())
                    .or_insert_with(|| State::Sgd {
                        velocity: vec![0.0; grad.len()],
                    });
                let State::Sgd { velocity } = state else {
                    unreachable!("optimizer kind fixed per instance")
                };
                for ((p, v), &g) in param.data_mut().iter_mut().zip(velocity).zip(grad) {
                    *v = momentum * *v + g;
                    *p -= lr * (*v + wd * *p);
                }
            }
            OptimizerKind::AdamW { beta1, beta2, eps } => {
                let state = self
                    .state
                    .entry(path.to_string())
                    .or_insert_with(|| State::AdamW {
                        m: vec![0.0; grad.len()],
                        v: vec![0.0; grad.len()],
                        t: 0,
                    });
                let State::AdamW { m, v, t } = state else {
                    unreachable!("optimizer kind fixed per instance")
                };
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for ((p, (mi, vi)), &g) in param
                    .data_mut()
                    .iter_mut()
                    .zip(m.iter_mut().zip(v.iter_mut()))
                    .zip(grad)
                {
                    *mi = beta1 * *mi + (1.0 - beta1) * g;
                    *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                    let m_hat = *mi / bc1;
                    let v_hat = *vi / bc2;
                    *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanilla_sgd_rule() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.1, 0.0);
        let mut p = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        opt.step("p", &mut p, &[0.5, -1.0]).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.1 * 0.5, -2.0 + 0.1]);
    }

    #[test]
    fn pure_decay_shrinks_by_factor() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.1, 0.5);
        let mut p = Tensor::new(vec![1], vec![2.0]).unwrap();
        opt.step("p", &mut p, &[0.0]).unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.5 }, 1.0, 0.0);
        let mut p = Tensor::new(vec![1], vec![0.0]).unwrap();
        opt.step("p", &mut p, &[1.0]).unwrap(); // v=1, p=-1
        opt.step("p", &mut p, &[1.0]).unwrap(); // v=1.5, p=-2.5
        assert!((p.data()[0] + 2.5).abs() < 1e-15);
    }

    #[test]
    fn adamw_single_step_hand_trace() {
        let (beta1, beta2, eps, lr, wd) = (0.9, 0.999, 1e-8, 0.01, 0.1);
        let mut opt = Optimizer::new(OptimizerKind::AdamW { beta1, beta2, eps }, lr, wd);
        let g = 0.3;
        let p0 = 1.5;
        let mut p = Tensor::new(vec![1], vec![p0]).unwrap();
        opt.step("p", &mut p, &[g]).unwrap();
        // first step: m̂ = g, v̂ = g², so Δ = lr·(g/(|g|+ε) + wd·p₀)
        let expect = p0 - lr * (g / (g.abs() + eps) + wd * p0);
        assert!((p.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut opt = Optimizer::new(OptimizerKind::sgd(), 0.1, 0.0);
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(opt.step("p", &mut p, &[f64::NAN]).is_err());
    }
}
