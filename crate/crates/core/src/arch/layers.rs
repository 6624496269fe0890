//! Parameter registry and the layer forward passes shared by both families.

use archleak_grad::nn::{self, Window};
use archleak_grad::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::model::{Mode, ModuleTag, ParamInfo};
use super::spec::{Activation, NormKind};

pub(crate) const NORM_EPS: f32 = 1e-5;
pub(crate) const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Normal(f32),
    /// Normal resampled into two standard deviations.
    TruncNormal(f32),
    Uniform(f32),
    Const(f32),
}

impl Init {
    pub(crate) fn sample(self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        match self {
            Init::Const(v) => vec![v; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => {
                let d = Normal::new(0.0f32, std).expect("positive std");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            Init::TruncNormal(std) => {
                let d = Normal::new(0.0f32, 1.0).unwrap();
                (0..n)
                    .map(|_| loop {
                        let z: f32 = d.sample(rng);
                        if z.abs() <= 2.0 {
                            break z * std;
                        }
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BufferInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub fill: f32,
}

/// Collects parameter descriptions without allocating their values.
#[derive(Debug, Default)]
pub(crate) struct Builder {
    pub params: Vec<ParamInfo>,
    pub inits: Vec<Init>,
    pub buffers: Vec<BufferInfo>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    pub weight: usize,
    pub bias: Option<usize>,
    pub window: Window,
    pub depthwise: bool,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Norm {
    Batch { gain: usize, bias: usize, mean: usize, var: usize },
    /// Over the channel axis of NCHW maps, or the last axis otherwise.
    Layer { gain: usize, bias: usize },
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub weight: usize,
    pub bias: usize,
}

/// Padding that centres a `kernel` window for the given stride.
pub(crate) fn same_padding(kernel: usize, stride: usize) -> usize {
    if kernel > stride {
        (kernel - stride + 1) / 2
    } else {
        0
    }
}

impl Builder {
    pub fn param(&mut self, name: String, tag: ModuleTag, shape: Vec<usize>, init: Init) -> usize {
        self.params.push(ParamInfo { name, tag, shape });
        self.inits.push(init);
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, shape: Vec<usize>, fill: f32) -> usize {
        self.buffers.push(BufferInfo { name, shape, fill });
        self.buffers.len() - 1
    }

    /// Convolution with kaiming-normal (fan-out) weights; the bias, when
    /// present, keeps the framework default `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        tag: ModuleTag,
        cin: usize,
        cout: usize,
        window: Window,
        depthwise: bool,
        bias: bool,
    ) -> Conv {
        let k = window.kernel;
        let shape = if depthwise {
            assert_eq!(cin, cout, "depthwise conv keeps the channel count");
            vec![cout, 1, k, k]
        } else {
            vec![cout, cin, k, k]
        };
        let std = (2.0 / (cout * k * k) as f32).sqrt();
        let weight = self.param(format!("{name}.weight"), tag, shape, Init::Normal(std));
        let fan_in = if depthwise { k * k } else { cin * k * k };
        let bound = 1.0 / (fan_in as f32).sqrt();
        let bias = bias.then(|| self.param(format!("{name}.bias"), tag, vec![cout], Init::Uniform(bound)));
        Conv { weight, bias, window, depthwise }
    }

    pub fn norm(&mut self, name: &str, tag: ModuleTag, channels: usize, kind: NormKind) -> Norm {
        let gain = self.param(format!("{name}.gain"), tag, vec![channels], Init::Const(1.0));
        let bias = self.param(format!("{name}.bias"), tag, vec![channels], Init::Const(0.0));
        match kind {
            NormKind::LayerNorm => Norm::Layer { gain, bias },
            NormKind::BatchNorm => {
                let mean = self.buffer(format!("{name}.running_mean"), vec![channels], 0.0);
                let var = self.buffer(format!("{name}.running_var"), vec![channels], 1.0);
                Norm::Batch { gain, bias, mean, var }
            }
        }
    }

    pub fn linear(&mut self, name: &str, tag: ModuleTag, din: usize, dout: usize, init: Init) -> Linear {
        let weight = self.param(format!("{name}.weight"), tag, vec![dout, din], init);
        let bias_init = match init {
            Init::Uniform(b) => Init::Uniform(b),
            _ => Init::Const(0.0),
        };
        let bias = self.param(format!("{name}.bias"), tag, vec![dout], bias_init);
        Linear { weight, bias }
    }

    pub fn materialize(&self, seed: u64) -> (Vec<Tensor>, Vec<Tensor>) {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = self
            .params
            .iter()
            .zip(&self.inits)
            .map(|(p, init)| {
                let n = p.shape.iter().product();
                Tensor::new(p.shape.clone(), init.sample(n, &mut rng))
            })
            .collect();
        let buffers = self
            .buffers
            .iter()
            .map(|b| Tensor::full(&b.shape, b.fill))
            .collect();
        (params, buffers)
    }
}

/// Per-call forward state: parameter vars, running statistics and the
/// statistic updates a training-mode pass produces.
pub(crate) struct Ctx<'a> {
    pub graph: &'a Graph,
    pub params: &'a [Var],
    pub buffers: &'a [Tensor],
    pub mode: Mode,
    pub updates: Vec<(usize, Tensor)>,
    pub drop_rng: Option<&'a mut ChaCha8Rng>,
}

impl Ctx<'_> {
    pub fn p(&self, i: usize) -> &Var {
        &self.params[i]
    }

    pub fn conv(&self, c: &Conv, x: &Var) -> Var {
        let w = self.p(c.weight);
        let b = c.bias.map(|i| self.p(i));
        if c.depthwise {
            nn::depthwise_conv2d(x, w, b, c.window)
        } else {
            nn::conv2d(x, w, b, c.window)
        }
    }

    /// Norm of an NCHW map.
    pub fn norm2d(&mut self, n: &Norm, x: &Var) -> Var {
        match *n {
            Norm::Layer { gain, bias } => {
                nn::layer_norm(x, 1, self.p(gain), self.p(bias), NORM_EPS)
            }
            Norm::Batch { gain, bias, mean, var } => match self.mode {
                Mode::Eval => nn::batch_norm_eval(
                    x,
                    self.p(gain),
                    self.p(bias),
                    &self.buffers[mean],
                    &self.buffers[var],
                    NORM_EPS,
                ),
                Mode::Train => {
                    let out = nn::batch_norm_train(x, self.p(gain), self.p(bias), NORM_EPS);
                    let m = BN_MOMENTUM;
                    let blend = |old: &Tensor, new: &Tensor| old.zip(new, |o, b| (1.0 - m) * o + m * b);
                    self.updates.push((mean, blend(&self.buffers[mean], &out.batch_mean)));
                    self.updates.push((var, blend(&self.buffers[var], &out.batch_var)));
                    out.output
                }
            },
        }
    }

    /// Layer norm over the last axis.
    pub fn norm_last(&self, n: &Norm, x: &Var) -> Var {
        match *n {
            Norm::Layer { gain, bias } => {
                let axis = x.shape().len() - 1;
                nn::layer_norm(x, axis, self.p(gain), self.p(bias), NORM_EPS)
            }
            Norm::Batch { .. } => unreachable!("batch norm is only used on image maps"),
        }
    }

    pub fn linear(&self, l: &Linear, x: &Var) -> Var {
        nn::linear(x, self.p(l.weight), Some(self.p(l.bias)))
    }

    /// Per-sample residual-branch mask for stochastic depth, `None` when
    /// the branch is kept as is.
    pub fn drop_mask(&mut self, batch: usize, prob: f32) -> Option<Var> {
        if prob <= 0.0 || self.mode == Mode::Eval {
            return None;
        }
        let rng = self.drop_rng.as_deref_mut()?;
        let keep = 1.0 - prob;
        let mask: Vec<f32> = (0..batch)
            .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        Some(self.graph.constant(Tensor::new(vec![batch, 1, 1, 1], mask)))
    }
}

pub(crate) fn activate(kind: Activation, x: &Var) -> Var {
    match kind {
        Activation::ReLU => x.relu(),
        Activation::GELU => nn::gelu(x),
    }
}
