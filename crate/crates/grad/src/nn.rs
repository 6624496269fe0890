//! Neural-network building blocks composed from the differentiable primitives.
//!
//! Image tensors are NCHW. Everything here is built from [`Var`] operations,
//! so all layers support second-order gradients.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::graph::Var;
use crate::tensor::{Tensor, PAD_INDEX};

/// Geometry of a 2-D convolution or pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding }
    }

    /// Output extent along one axis, or `None` if the window does not fit.
    pub fn output_len(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
enum Layout {
    /// `[B, L, C*k*k]` for dense convolution.
    Dense,
    /// `[B, C, L, k*k]` for depthwise convolution.
    Depthwise,
}

type IndexKey = (Layout, [usize; 4], Window);

thread_local! {
    static INDEX_CACHE: RefCell<HashMap<IndexKey, Arc<Vec<u32>>>> = RefCell::new(HashMap::new());
}

fn unfold_index(layout: Layout, dims: [usize; 4], win: Window) -> Arc<Vec<u32>> {
    INDEX_CACHE.with(|cache| {
        if let Some(ix) = cache.borrow().get(&(layout, dims, win)) {
            return Arc::clone(ix);
        }
        let ix = Arc::new(build_unfold_index(layout, dims, win));
        let mut cache = cache.borrow_mut();
        if cache.len() > 256 {
            cache.clear();
        }
        cache.insert((layout, dims, win), Arc::clone(&ix));
        ix
    })
}

fn build_unfold_index(layout: Layout, dims: [usize; 4], win: Window) -> Vec<u32> {
    let [b, c, h, w] = dims;
    let oh = win.output_len(h).expect("window does not fit input height");
    let ow = win.output_len(w).expect("window does not fit input width");
    let k = win.kernel;
    let mut index = Vec::with_capacity(b * c * oh * ow * k * k);
    let source = |bi: usize, ci: usize, y: usize, x: usize, ki: usize, kj: usize| -> u32 {
        let iy = (y * win.stride + ki) as isize - win.padding as isize;
        let ix = (x * win.stride + kj) as isize - win.padding as isize;
        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
            PAD_INDEX
        } else {
            (((bi * c + ci) * h + iy as usize) * w + ix as usize) as u32
        }
    };
    match layout {
        Layout::Dense => {
            for bi in 0..b {
                for y in 0..oh {
                    for x in 0..ow {
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    index.push(source(bi, ci, y, x, ki, kj));
                                }
                            }
                        }
                    }
                }
            }
        }
        Layout::Depthwise => {
            for bi in 0..b {
                for ci in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            for ki in 0..k {
                                for kj in 0..k {
                                    index.push(source(bi, ci, y, x, ki, kj));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    index
}

fn dims4(x: &Var) -> [usize; 4] {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected NCHW input, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

/// Dense convolution. `weight` is `[O, C, k, k]`, `bias` is `[O]`.
pub fn conv2d(x: &Var, weight: &Var, bias: Option<&Var>, win: Window) -> Var {
    let [b, c, h, w] = dims4(x);
    let ws = weight.shape();
    assert_eq!(ws.len(), 4, "conv2d weight must be [O, C, k, k]");
    assert_eq!(ws[1], c, "conv2d: weight expects {} channels, input has {c}", ws[1]);
    assert_eq!(ws[2], win.kernel, "conv2d: kernel size mismatch");
    let o = ws[0];
    let oh = win.output_len(h).expect("conv2d: window does not fit input");
    let ow = win.output_len(w).expect("conv2d: window does not fit input");
    let y = if win.kernel == 1 && win.stride == 1 && win.padding == 0 {
        let rows = x.permute(&[0, 2, 3, 1]).reshape(&[b * h * w, c]);
        rows.matmul(&weight.reshape(&[o, c]).t())
            .reshape(&[b, h, w, o])
            .permute(&[0, 3, 1, 2])
    } else {
        let ck = c * win.kernel * win.kernel;
        let index = unfold_index(Layout::Dense, [b, c, h, w], win);
        let cols = x.gather(index, &[b * oh * ow, ck]);
        cols.matmul(&weight.reshape(&[o, ck]).t())
            .reshape(&[b, oh * ow, o])
            .permute(&[0, 2, 1])
            .reshape(&[b, o, oh, ow])
    };
    match bias {
        Some(bias) => y.add(&bias.reshape(&[1, o, 1, 1])),
        None => y,
    }
}

/// Depthwise convolution (one filter per channel). `weight` is `[C, 1, k, k]`.
pub fn depthwise_conv2d(x: &Var, weight: &Var, bias: Option<&Var>, win: Window) -> Var {
    let [b, c, h, w] = dims4(x);
    let ws = weight.shape();
    assert_eq!(ws, vec![c, 1, win.kernel, win.kernel], "depthwise weight shape");
    let oh = win.output_len(h).expect("depthwise_conv2d: window does not fit input");
    let ow = win.output_len(w).expect("depthwise_conv2d: window does not fit input");
    let kk = win.kernel * win.kernel;
    let index = unfold_index(Layout::Depthwise, [b, c, h, w], win);
    let cols = x.gather(index, &[b, c, oh * ow, kk]);
    let y = cols
        .mul(&weight.reshape(&[1, c, 1, kk]))
        .sum_to(&[b, c, oh * ow, 1])
        .reshape(&[b, c, oh, ow]);
    match bias {
        Some(bias) => y.add(&bias.reshape(&[1, c, 1, 1])),
        None => y,
    }
}

/// Max pooling; padded positions never win.
pub fn max_pool2d(x: &Var, win: Window) -> Var {
    let [b, c, h, w] = dims4(x);
    let oh = win.output_len(h).expect("max_pool2d: window does not fit input");
    let ow = win.output_len(w).expect("max_pool2d: window does not fit input");
    let value = x.value();
    let data = value.data();
    let mut index = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best: Option<(usize, f32)> = None;
                for ki in 0..win.kernel {
                    let iy = (y * win.stride + ki) as isize - win.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..win.kernel {
                        let ix = (xo * win.stride + kj) as isize - win.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let at = base + iy as usize * w + ix as usize;
                        if best.is_none_or(|(_, v)| data[at] > v) {
                            best = Some((at, data[at]));
                        }
                    }
                }
                index.push(best.map_or(PAD_INDEX, |(at, _)| at as u32));
            }
        }
    }
    x.gather(Arc::new(index), &[b, c, oh, ow])
}

/// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool(x: &Var) -> Var {
    let [b, c, h, w] = dims4(x);
    x.sum_to(&[b, c, 1, 1]).reshape(&[b, c]).mul_scalar(1.0 / (h * w) as f32)
}

/// `x @ weight^T + bias` with `weight` of shape `[out, in]`.
pub fn linear(x: &Var, weight: &Var, bias: Option<&Var>) -> Var {
    let y = x.matmul(&weight.t());
    match bias {
        Some(b) => y.add(b),
        None => y,
    }
}

/// Normalize over `axis` at every other position, then apply a per-feature
/// gain and bias. `gain` and `bias` have the length of `axis`.
pub fn layer_norm(x: &Var, axis: usize, gain: &Var, bias: &Var, eps: f32) -> Var {
    let shape = x.shape();
    let d = shape[axis];
    let mean = x.mean_axis(axis);
    let centered = x.sub(&mean);
    let var = centered.square().sum_axis(axis).mul_scalar(1.0 / d as f32);
    let normed = centered.mul(&var.add_scalar(eps).powf(-0.5));
    let mut pshape = vec![1; shape.len()];
    pshape[axis] = d;
    normed.mul(&gain.reshape(&pshape)).add(&bias.reshape(&pshape))
}

/// Output of a training-mode batch norm together with the batch statistics
/// needed for running-average updates.
pub struct BatchNormOutput {
    pub output: Var,
    pub batch_mean: Tensor,
    /// Unbiased batch variance.
    pub batch_var: Tensor,
}

/// Batch norm over `(N, H, W)` using batch statistics.
pub fn batch_norm_train(x: &Var, gain: &Var, bias: &Var, eps: f32) -> BatchNormOutput {
    let [b, c, h, w] = dims4(x);
    let n = (b * h * w) as f32;
    let mean = x.sum_to(&[1, c, 1, 1]).mul_scalar(1.0 / n);
    let centered = x.sub(&mean);
    let var = centered.square().sum_to(&[1, c, 1, 1]).mul_scalar(1.0 / n);
    let normed = centered.mul(&var.add_scalar(eps).powf(-0.5));
    let output = normed
        .mul(&gain.reshape(&[1, c, 1, 1]))
        .add(&bias.reshape(&[1, c, 1, 1]));
    let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
    BatchNormOutput {
        output,
        batch_mean: mean.value().reshape(&[c]),
        batch_var: var.value().reshape(&[c]).map(move |v| v * unbiased),
    }
}

/// Batch norm with fixed running statistics.
pub fn batch_norm_eval(
    x: &Var,
    gain: &Var,
    bias: &Var,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f32,
) -> Var {
    let [_, c, _, _] = dims4(x);
    let g = x.graph();
    let mean = g.constant(running_mean.reshape(&[1, c, 1, 1]));
    let inv_std = g.constant(running_var.map(move |v| 1.0 / (v + eps).sqrt()).reshape(&[1, c, 1, 1]));
    x.sub(&mean)
        .mul(&inv_std)
        .mul(&gain.reshape(&[1, c, 1, 1]))
        .add(&bias.reshape(&[1, c, 1, 1]))
}

/// GELU, tanh form: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu(x: &Var) -> Var {
    let c = (2.0f32 / std::f32::consts::PI).sqrt();
    let inner = x.add(&x.powf(3.0).mul_scalar(0.044715)).mul_scalar(c);
    x.mul(&inner.tanh().add_scalar(1.0)).mul_scalar(0.5)
}

/// Softmax along the last axis.
pub fn softmax(x: &Var) -> Var {
    let shift = x.graph().constant(x.value().max_last());
    let e = x.sub(&shift).exp();
    let last = x.shape().len() - 1;
    e.div(&e.sum_axis(last))
}

/// Log-softmax along the last axis.
pub fn log_softmax(x: &Var) -> Var {
    let shift = x.graph().constant(x.value().max_last());
    let z = x.sub(&shift);
    let last = x.shape().len() - 1;
    z.sub(&z.exp().sum_axis(last).ln())
}

/// Mean cross-entropy between `logits [B, K]` and target distributions `[B, K]`.
pub fn cross_entropy(logits: &Var, targets: &Tensor) -> Var {
    let shape = logits.shape();
    assert_eq!(shape, targets.shape(), "cross_entropy: logits vs targets");
    let logp = log_softmax(logits);
    logp.mul_const(targets).sum().mul_scalar(-1.0 / shape[0] as f32)
}

/// One-hot target rows for hard labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0f32; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        assert!(l < classes, "label {l} out of range for {classes} classes");
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Scaled dot-product attention over `[B, heads, T, d]` tensors.
pub fn attention(q: &Var, k: &Var, v: &Var) -> Var {
    let d = *q.shape().last().unwrap() as f32;
    let scores = q.matmul(&k.t()).mul_scalar(1.0 / d.sqrt());
    softmax(&scores).matmul(v)
}
