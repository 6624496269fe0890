//! First-order optimizers over flat `f32` buffers, PyTorch semantics.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    AdamW,
    Adam,
    SGD,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub weight_decay: f32,
    /// `(beta1, beta2)` for Adam variants; `(momentum, _)` for SGD.
    pub betas: (f32, f32),
    pub eps: f32,
}

impl OptimizerSettings {
    pub fn adam(betas: (f32, f32)) -> Self {
        Self { kind: OptimizerKind::Adam, weight_decay: 0.0, betas, eps: 1e-8 }
    }
}

/// Optimizer state for a list of parameter buffers.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub settings: OptimizerSettings,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    steps: u32,
}

impl Optimizer {
    pub fn new(settings: OptimizerSettings, sizes: &[usize]) -> Self {
        let second = match settings.kind {
            OptimizerKind::SGD => Vec::new(),
            _ => sizes.iter().map(|&n| vec![0.0; n]).collect(),
        };
        Self {
            settings,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }

    /// Update every buffer in `params` with the matching gradient at `lr`.
    pub fn step(&mut self, params: &mut [Vec<f32>], grads: &[&[f32]], lr: f32) {
        assert_eq!(params.len(), self.first.len(), "optimizer built for another parameter list");
        self.steps += 1;
        let s = self.settings;
        let t = self.steps as i32;
        let (b1, b2) = s.betas;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[i];
            match s.kind {
                OptimizerKind::SGD => {
                    for j in 0..p.len() {
                        let gj = g[j] + s.weight_decay * p[j];
                        m[j] = if t == 1 { gj } else { b1 * m[j] + gj };
                        p[j] -= lr * if b1 > 0.0 { m[j] } else { gj };
                    }
                }
                OptimizerKind::Adam | OptimizerKind::AdamW => {
                    let v = &mut self.second[i];
                    let decoupled = s.kind == OptimizerKind::AdamW;
                    for j in 0..p.len() {
                        let mut gj = g[j];
                        if decoupled {
                            p[j] *= 1.0 - lr * s.weight_decay;
                        } else {
                            gj += s.weight_decay * p[j];
                        }
                        m[j] = b1 * m[j] + (1.0 - b1) * gj;
                        v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                        let denom = (v[j] / bc2).sqrt() + s.eps;
                        p[j] -= lr * (m[j] / bc1) / denom;
                    }
                }
            }
        }
    }
}

/// Cosine annealing from `base` to zero over `total` steps.
pub fn cosine_lr(base: f32, step: usize, total: usize) -> f32 {
    if total == 0 {
        return base;
    }
    let frac = step.min(total) as f64 / total as f64;
    (base as f64 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())) as f32
}
