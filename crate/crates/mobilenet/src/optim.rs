//! Optimizers over the parameters reached by [`Backbone::visit`].

use serde::{Deserialize, Serialize};

use crate::arch::Backbone;
use crate::layers::Param;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f32, weight_decay: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32, weight_decay: f32 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::Sgd {
            momentum: 0.9,
            weight_decay: 4e-5,
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f32, step: usize, total: usize) -> f32 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    (base as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
}

/// Optimizer state is indexed by visit order, which is fixed per architecture.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn step(&mut self, net: &mut Backbone, lr: f32) {
        self.step += 1;
        let step = self.step;
        let kind = self.kind;
        let first = &mut self.first;
        let second = &mut self.second;
        let mut idx = 0;
        net.visit(&mut |_, p: &mut Param| {
            if !p.trainable {
                return;
            }
            if first.len() <= idx {
                first.push(vec![0.0; p.len()]);
                second.push(match kind {
                    OptimizerKind::Adam { .. } => vec![0.0; p.len()],
                    OptimizerKind::Sgd { .. } => Vec::new(),
                });
            }
            match kind {
                OptimizerKind::Sgd { momentum, weight_decay } => {
                    let buf = &mut first[idx];
                    for ((v, g), b) in p.value.iter_mut().zip(&p.grad).zip(buf.iter_mut()) {
                        let g = g + weight_decay * *v;
                        *b = momentum * *b + g;
                        *v -= lr * *b;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps, weight_decay } => {
                    let bc1 = 1.0 - beta1.powi(step as i32);
                    let bc2 = 1.0 - beta2.powi(step as i32);
                    let (m, s) = (&mut first[idx], &mut second[idx]);
                    for (((v, g), m), s) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(s.iter_mut()) {
                        let g = g + weight_decay * *v;
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *s = beta2 * *s + (1.0 - beta2) * g * g;
                        *v -= lr * (*m / bc1) / ((*s / bc2).sqrt() + eps);
                    }
                }
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 10), 1e-3);
        assert!(cosine_lr(1e-3, 10, 10).abs() < 1e-12);
        assert!((cosine_lr(1e-3, 5, 10) - 5e-4).abs() < 1e-9);
    }
}
