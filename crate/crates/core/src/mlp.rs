//! Small fully connected classifiers used as attack models.

use archleak_grad::{nn, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl MlpConfig {
    /// Adam at 1e-3 for 100 epochs over the given hidden widths.
    pub fn new(hidden: &[usize], seed: u64) -> Self {
        Self { hidden: hidden.to_vec(), lr: 1e-3, epochs: 100, batch_size: 64, seed }
    }
}

/// ReLU MLP over standardized inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub dims: Vec<usize>,
    /// `[w0, b0, w1, b1, ...]`, weights `[out, in]`.
    pub params: Vec<Tensor>,
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
}

fn forward(params: &[Var], x: &Var) -> Var {
    let layers = params.len() / 2;
    let mut h = x.clone();
    for l in 0..layers {
        h = nn::linear(&h, &params[2 * l], Some(&params[2 * l + 1]));
        if l + 1 < layers {
            h = h.relu();
        }
    }
    h
}

impl Mlp {
    /// Fit on rows of `x` (`[n, d]`) with labels in `0..classes`.
    pub fn fit(x: &Tensor, labels: &[usize], classes: usize, cfg: &MlpConfig) -> Result<Mlp> {
        let s = x.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(format!("features {s:?} for {} labels", labels.len())));
        }
        if s[0] == 0 {
            return Err(Error::domain("attack model needs training rows"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::domain(format!("label {l} outside 0..{classes}")));
        }
        if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
            return Err(Error::config("mlp: epochs, batch size and lr must be positive"));
        }
        let (n, d) = (s[0], s[1]);
        let (mean, scale) = moments(x.data(), n, d);
        let mut dims = vec![d];
        dims.extend(&cfg.hidden);
        dims.push(classes);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = Vec::new();
        for w in dims.windows(2) {
            let bound = 1.0 / (w[0] as f32).sqrt();
            let mut draw = |k: usize| (0..k).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<f32>>();
            params.push(Tensor::new(vec![w[1], w[0]], draw(w[0] * w[1])));
            params.push(Tensor::new(vec![w[1]], draw(w[1])));
        }
        let mut mlp = Mlp { dims, params, mean, scale };
        let xs = mlp.standardize(x);
        let sizes: Vec<usize> = mlp.params.iter().map(Tensor::numel).collect();
        let mut opt = Optimizer::new(OptimizerSettings::adam((0.9, 0.999)), &sizes);
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let xb = rows(&xs, chunk, d);
                let yb = nn::one_hot(&chunk.iter().map(|&i| labels[i]).collect::<Vec<_>>(), classes);
                let g = Graph::new();
                let vars: Vec<Var> = mlp.params.iter().map(|p| g.param(p.clone())).collect();
                let loss = nn::cross_entropy(&forward(&vars, &g.constant(xb)), &yb);
                let grads: Vec<Tensor> = g.grad(&loss, &vars, false).iter().map(Var::value).collect();
                let mut bufs: Vec<Vec<f32>> = std::mem::take(&mut mlp.params).into_iter().map(Tensor::into_vec).collect();
                opt.step(&mut bufs, &grads.iter().map(Tensor::data).collect::<Vec<_>>(), cfg.lr);
                mlp.params = bufs.into_iter().zip(&grads).map(|(b, g)| Tensor::new(g.shape().to_vec(), b)).collect();
            }
        }
        if mlp.params.iter().any(|p| !p.all_finite()) {
            return Err(Error::domain("attack model diverged"));
        }
        Ok(mlp)
    }

    fn standardize(&self, x: &Tensor) -> Tensor {
        let d = self.mean.len();
        let v: Vec<f32> = x.data().iter().enumerate().map(|(i, &v)| (v - self.mean[i % d]) / self.scale[i % d]).collect();
        Tensor::new(x.shape().to_vec(), v)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.dims[0] {
            return Err(Error::shape(format!("features {s:?}, model expects width {}", self.dims[0])));
        }
        let g = Graph::inference();
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        Ok(forward(&vars, &g.constant(self.standardize(x))).value())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_last())
    }

    /// Softmax probability of class 1 for each row of a two-class model.
    pub fn positive_score(&self, x: &Tensor) -> Result<Vec<f64>> {
        let l = self.logits(x)?;
        let k = self.dims[self.dims.len() - 1];
        if k != 2 {
            return Err(Error::domain(format!("positive score needs two classes, model has {k}")));
        }
        Ok(l.data().chunks(2).map(|r| 1.0 / (1.0 + ((r[0] - r[1]) as f64).exp())).collect())
    }
}

fn moments(x: &[f32], n: usize, d: usize) -> (Vec<f32>, Vec<f32>) {
    let mut mean = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    for row in x.chunks(d) {
        for j in 0..d {
            mean[j] += row[j] as f64;
            sq[j] += (row[j] as f64).powi(2);
        }
    }
    let mean: Vec<f64> = mean.iter().map(|m| m / n as f64).collect();
    let scale = sq.iter().zip(&mean).map(|(s, m)| ((s / n as f64 - m * m).max(0.0).sqrt().max(1e-6)) as f32).collect();
    (mean.into_iter().map(|m| m as f32).collect(), scale)
}

fn rows(x: &Tensor, idx: &[usize], d: usize) -> Tensor {
    let data = x.data();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&data[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![idx.len(), d], out)
}
