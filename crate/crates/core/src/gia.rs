//! Gradient inversion: recover a training batch from its parameter
//! gradients by optimizing a dummy batch until its gradients match.

use archleak_grad::{nn, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{Mode, ModuleTag, Selection, TaggedModel};
use crate::error::{Error, Result};
use crate::eval::{reconstruction_metrics, Images, ReconMetrics};
use crate::optim::{Optimizer, OptimizerSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cost {
    CosineSimilarity,
    SquaredL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GiaOptimizer {
    Adam,
}

/// Batch-norm behaviour while the observed gradients are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaptureMode {
    /// A training step: batch statistics.
    Train,
    /// Running statistics.
    Eval,
}

impl From<CaptureMode> for Mode {
    fn from(m: CaptureMode) -> Mode {
        match m {
            CaptureMode::Train => Mode::Train,
            CaptureMode::Eval => Mode::Eval,
        }
    }
}

pub const DEFAULT_SNAPSHOTS: [usize; 9] = [1, 50, 100, 500, 1000, 1500, 2000, 2500, 3000];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GiaConfig {
    pub cost: Cost,
    pub tv_weight: f32,
    pub optimizer: GiaOptimizer,
    pub lr: f32,
    pub iterations: usize,
    pub seed: u64,
    pub selection: Selection,
    pub capture_mode: CaptureMode,
    /// Multiply the learning rate by 0.1 at 3/8, 5/8 and 7/8 of the run.
    pub lr_decay: bool,
    /// Feed `sign(grad)` to the optimizer instead of the raw gradient.
    pub signed_gradients: bool,
    /// Iteration counts after which the dummy batch is recorded.
    pub snapshots: Vec<usize>,
}

impl Default for GiaConfig {
    fn default() -> Self {
        Self {
            cost: Cost::CosineSimilarity,
            tv_weight: 1e-4,
            optimizer: GiaOptimizer::Adam,
            lr: 0.1,
            iterations: 3000,
            seed: 0,
            selection: Selection::All,
            capture_mode: CaptureMode::Eval,
            lr_decay: true,
            signed_gradients: false,
            snapshots: DEFAULT_SNAPSHOTS.to_vec(),
        }
    }
}

impl GiaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("gia: iterations must be at least 1"));
        }
        if !(self.tv_weight >= 0.0) {
            return Err(Error::config("gia: tv_weight must be non-negative"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("gia: lr must be positive"));
        }
        if let Selection::Tags(t) = &self.selection {
            if t.is_empty() {
                return Err(Error::config("gia: empty selection"));
            }
        }
        Ok(())
    }

    fn lr_at(&self, iteration: usize) -> f32 {
        if !self.lr_decay {
            return self.lr;
        }
        let n = self.iterations;
        let drops = [3 * n / 8, 5 * n / 8, 7 * n / 8].iter().filter(|&&d| iteration >= d).count();
        self.lr * 0.1f32.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    /// Position in the model's parameter list.
    pub index: usize,
    pub name: String,
    pub tag: ModuleTag,
    pub grad: Tensor,
}

/// Observed gradients, one entry per parameter, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub entries: Vec<GradEntry>,
}

impl GradientBundle {
    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.grad.numel()).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.entries.iter().map(|e| e.grad.sq_norm_f64()).sum()
    }
}

fn check_batch(model: &TaggedModel, x: &Tensor, labels: &[usize]) -> Result<()> {
    let b = *x.shape().first().unwrap_or(&0);
    if b == 0 {
        return Err(Error::domain("gradient capture needs a nonempty batch"));
    }
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= model.spec.num_classes) {
        return Err(Error::domain(format!("label {l} outside 0..{}", model.spec.num_classes)));
    }
    Ok(())
}

/// Gradient of the mean cross-entropy of `(x, labels)` for every parameter.
pub fn capture_gradients(
    model: &TaggedModel,
    x: &Tensor,
    labels: &[usize],
    mode: CaptureMode,
) -> Result<GradientBundle> {
    check_batch(model, x, labels)?;
    let g = Graph::new();
    let params = model.param_vars(&g);
    let input = g.constant(x.clone());
    let out = model.forward(&g, &params, &input, mode.into(), None)?;
    let target = nn::one_hot(labels, model.spec.num_classes);
    let loss = nn::cross_entropy(&out.logits, &target);
    let grads = g.grad(&loss, &params, false);
    Ok(GradientBundle {
        entries: grads
            .into_iter()
            .enumerate()
            .map(|(i, gr)| GradEntry {
                index: i,
                name: model.info[i].name.clone(),
                tag: model.info[i].tag,
                grad: gr.value(),
            })
            .collect(),
    })
}

/// Keep exactly the entries whose tag is selected.
pub fn select_gradients(bundle: &GradientBundle, selection: &Selection) -> Result<GradientBundle> {
    let entries: Vec<GradEntry> =
        bundle.entries.iter().filter(|e| selection.contains(e.tag)).cloned().collect();
    if entries.is_empty() {
        return Err(Error::domain(format!(
            "selection {} matches no parameter of the model",
            selection.label()
        )));
    }
    Ok(GradientBundle { entries })
}

/// Mean absolute difference between vertical neighbours plus the same for
/// horizontal neighbours of an NCHW batch.
pub fn total_variation(x: &Var) -> Var {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let mut tv: Option<Var> = None;
    if h > 1 {
        let d = x.narrow(2, 1, h - 1).sub(&x.narrow(2, 0, h - 1)).abs().mean();
        tv = Some(d);
    }
    if w > 1 {
        let d = x.narrow(3, 1, w - 1).sub(&x.narrow(3, 0, w - 1)).abs().mean();
        tv = Some(match tv {
            Some(t) => t.add(&d),
            None => d,
        });
    }
    tv.unwrap_or_else(|| x.graph().constant(Tensor::scalar(0.0)))
}

/// Plain-value total variation, same definition as [`total_variation`].
pub fn total_variation_value(x: &Tensor) -> f32 {
    let g = Graph::inference();
    total_variation(&g.constant(x.clone())).item()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InversionFlags {
    /// Observed gradients have zero norm; the cosine term is pinned at 1.
    pub zero_target_norm: bool,
    /// Iterations at which the dummy gradients had zero norm.
    pub zero_dummy_norm_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub reconstruction: Tensor,
    /// Cost before each update, one value per iteration.
    pub loss_trace: Vec<f32>,
    /// Gradient-match term before each update.
    pub match_trace: Vec<f32>,
    /// Cost of the final reconstruction.
    pub final_cost: f32,
    pub metrics: Option<ReconMetrics>,
    pub snapshots: Vec<(usize, Tensor)>,
    pub flags: InversionFlags,
    /// Names of the parameters whose gradients entered the cost.
    pub used_params: Vec<String>,
}

/// Uniform `[0, 1)` dummy batch of `shape` drawn from `seed`.
pub fn random_dummy(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f32>()).collect())
}

struct Evaluation {
    cost: f32,
    matching: f32,
    grad: Option<Tensor>,
    zero_dummy: bool,
}

struct Problem<'a> {
    model: &'a TaggedModel,
    bundle: &'a GradientBundle,
    target: Tensor,
    cfg: &'a GiaConfig,
    target_sq_norm: f64,
}

impl Problem<'_> {
    fn evaluate(&self, x: &Tensor, with_grad: bool) -> Result<Evaluation> {
        let g = Graph::new();
        let selected: Vec<bool> = {
            let mut s = vec![false; self.model.params.len()];
            for e in &self.bundle.entries {
                s[e.index] = true;
            }
            s
        };
        let params: Vec<Var> = self
            .model
            .params
            .iter()
            .zip(&selected)
            .map(|(t, &sel)| if sel { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let wrt: Vec<Var> = self.bundle.entries.iter().map(|e| params[e.index].clone()).collect();
        let xv = g.param(x.clone());
        let out = self.model.forward(&g, &params, &xv, self.cfg.capture_mode.into(), None)?;
        let loss = nn::cross_entropy(&out.logits, &self.target);
        let dummy = g.grad(&loss, &wrt, true);

        let mut zero_dummy = false;
        let matching = match self.cfg.cost {
            Cost::CosineSimilarity => {
                let mut dot: Option<Var> = None;
                let mut gg: Option<Var> = None;
                for (d, e) in dummy.iter().zip(&self.bundle.entries) {
                    let t = d.mul_const(&e.grad).sum();
                    let s = d.square().sum();
                    dot = Some(match dot {
                        Some(a) => a.add(&t),
                        None => t,
                    });
                    gg = Some(match gg {
                        Some(a) => a.add(&s),
                        None => s,
                    });
                }
                let (dot, gg) = (dot.expect("nonempty selection"), gg.expect("nonempty selection"));
                if self.target_sq_norm == 0.0 || gg.item() == 0.0 {
                    zero_dummy = gg.item() == 0.0;
                    g.constant(Tensor::scalar(1.0))
                } else {
                    let denom = gg.mul_scalar(self.target_sq_norm as f32).sqrt();
                    dot.div(&denom).neg().add_scalar(1.0)
                }
            }
            Cost::SquaredL2 => {
                let mut acc: Option<Var> = None;
                for (d, e) in dummy.iter().zip(&self.bundle.entries) {
                    let t = d.sub(&g.constant(e.grad.clone())).square().sum();
                    acc = Some(match acc {
                        Some(a) => a.add(&t),
                        None => t,
                    });
                }
                acc.expect("nonempty selection")
            }
        };
        let cost = if self.cfg.tv_weight > 0.0 {
            matching.add(&total_variation(&xv).mul_scalar(self.cfg.tv_weight))
        } else {
            matching.clone()
        };
        let grad = with_grad.then(|| g.grad(&cost, &[xv], false).remove(0).value());
        Ok(Evaluation { cost: cost.item(), matching: matching.item(), grad, zero_dummy })
    }
}

/// Reconstruct the batch behind `bundle`.
///
/// `init` replaces the random dummy when given; `ground_truth` enables the
/// reconstruction metrics.
pub fn invert(
    model: &TaggedModel,
    bundle: &GradientBundle,
    labels: &[usize],
    cfg: &GiaConfig,
    init: Option<&Tensor>,
    ground_truth: Option<&Tensor>,
) -> Result<InversionResult> {
    cfg.validate()?;
    if bundle.entries.is_empty() {
        return Err(Error::domain("inversion needs at least one observed gradient"));
    }
    let [c, h, w] = model.spec.input_shape;
    let shape = [labels.len(), c, h, w];
    let mut x = match init {
        Some(t) => {
            if t.shape() != shape {
                return Err(Error::shape(format!("initial dummy {:?}, expected {shape:?}", t.shape())));
            }
            t.map(|v| v.clamp(0.0, 1.0))
        }
        None => random_dummy(&shape, cfg.seed),
    };
    check_batch(model, &x, labels)?;
    let problem = Problem {
        model,
        bundle,
        target: nn::one_hot(labels, model.spec.num_classes),
        cfg,
        target_sq_norm: bundle.sq_norm(),
    };
    let mut flags = InversionFlags { zero_target_norm: problem.target_sq_norm == 0.0, ..Default::default() };

    let mut opt = Optimizer::new(OptimizerSettings::adam((0.9, 0.999)), &[x.numel()]);
    let mut loss_trace = Vec::with_capacity(cfg.iterations);
    let mut match_trace = Vec::with_capacity(cfg.iterations);
    let mut snapshots = Vec::new();
    for it in 0..cfg.iterations {
        let ev = problem.evaluate(&x, true)?;
        if !ev.cost.is_finite() {
            return Err(Error::Inversion { iteration: it, reason: format!("cost is {}", ev.cost) });
        }
        flags.zero_dummy_norm_iterations += ev.zero_dummy as usize;
        loss_trace.push(ev.cost);
        match_trace.push(ev.matching);
        let mut grad = ev.grad.expect("requested");
        if !grad.all_finite() {
            return Err(Error::Inversion { iteration: it, reason: "non-finite gradient".into() });
        }
        if cfg.signed_gradients {
            grad = grad.map(|v| if v == 0.0 { 0.0 } else { v.signum() });
        }
        let mut buf = vec![x.into_vec()];
        opt.step(&mut buf, &[grad.data()], cfg.lr_at(it));
        let data: Vec<f32> = buf.pop().expect("one buffer").into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        x = Tensor::new(shape.to_vec(), data);
        if cfg.snapshots.contains(&(it + 1)) {
            snapshots.push((it + 1, x.clone()));
        }
    }
    let final_cost = problem.evaluate(&x, false)?.cost;
    let metrics = match ground_truth {
        Some(gt) => {
            let a = Images::new(gt.data(), shape)?;
            let b = Images::new(x.data(), shape)?;
            Some(reconstruction_metrics(&a, &b)?)
        }
        None => None,
    };
    Ok(InversionResult {
        reconstruction: x,
        loss_trace,
        match_trace,
        final_cost,
        metrics,
        snapshots,
        flags,
        used_params: bundle.entries.iter().map(|e| e.name.clone()).collect(),
    })
}
