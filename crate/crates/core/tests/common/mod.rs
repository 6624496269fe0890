//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use archleak_core::arch::{build, receptive_field, receptive_field_of_stack, ArchSpec, Mode, ReceptiveFieldReport};
use archleak_grad::nn::{conv2d, Window};
use archleak_grad::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Inclusive `[first, last]` rows and columns with a nonzero input gradient.
pub type Extent = ((usize, usize), (usize, usize));

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
}

/// Gradient of the centre unit of `out` (summed over channels) w.r.t. `x`.
fn centre_extent(graph: &Graph, x: &Var, out: &Var) -> Option<(Extent, (usize, usize))> {
    let s = out.shape();
    let (c, oh, ow) = (s[1], s[2], s[3]);
    let (ci, cj) = (oh / 2, ow / 2);
    let mut mask = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        mask[(ch * oh + ci) * ow + cj] = 1.0;
    }
    let probe = out.mul_const(&Tensor::new(vec![1, c, oh, ow], mask)).sum();
    let g = graph.grad(&probe, std::slice::from_ref(x), false).remove(0).value();
    let xs = g.shape().to_vec();
    let (h, w) = (xs[2], xs[3]);
    let (mut rows, mut cols) = ((usize::MAX, 0), (usize::MAX, 0));
    for ch in 0..xs[1] {
        for r in 0..h {
            for q in 0..w {
                if g.data()[(ch * h + r) * w + q] != 0.0 {
                    rows = (rows.0.min(r), rows.1.max(r));
                    cols = (cols.0.min(q), cols.1.max(q));
                }
            }
        }
    }
    (rows.0 != usize::MAX).then_some(((rows, cols), (ci, cj)))
}

fn clip(window: (isize, isize), side: usize) -> (usize, usize) {
    (window.0.max(0) as usize, window.1.min(side as isize - 1) as usize)
}

/// Extent the analyzer predicts for output unit `(ci, cj)`, clipped to the image.
pub fn predicted(report: &ReceptiveFieldReport, (ci, cj): (usize, usize), side: usize) -> Extent {
    (clip(report.window_of(ci), side), clip(report.window_of(cj), side))
}

/// Random conv stack with random signed weights, probed on a `side` x `side` input.
pub fn probe_stack(windows: &[Window], side: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = Graph::new();
    let x = graph.param(normal_tensor(&[1, 2, side, side], &mut rng));
    let mut h = x.clone();
    let mut cin = 2;
    for w in windows {
        let cout = rng.random_range(1..=3);
        let weight = graph.constant(normal_tensor(&[cout, cin, w.kernel, w.kernel], &mut rng));
        h = conv2d(&h, &weight, None, *w);
        cin = cout;
    }
    let named: Vec<(String, Window)> = windows.iter().enumerate().map(|(i, w)| (format!("conv{i}"), *w)).collect();
    let report = receptive_field_of_stack(&named);
    let (got, centre) = centre_extent(&graph, &x, &h).ok_or("gradient vanished everywhere")?;
    let want = predicted(&report, centre, side);
    if got != want {
        return Err(format!("stack {windows:?} on {side}px: probe {got:?}, analyzer {want:?}"));
    }
    Ok(())
}

/// Probe the spatial path of a ladder spec built with random weights.
pub fn probe_spec(spec: &ArchSpec, seed: u64) -> Result<(), String> {
    let model = build(spec, seed).map_err(|e| e.to_string())?;
    let report = receptive_field(spec).map_err(|e| e.to_string())?;
    let [c, h, w] = spec.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let graph = Graph::new();
    let x = graph.param(normal_tensor(&[1, c, h, w], &mut rng));
    let params = model.param_vars(&graph);
    let map = model.feature_map(&graph, &params, &x, Mode::Eval).map_err(|e| e.to_string())?;
    let (got, centre) = centre_extent(&graph, &x, &map).ok_or("gradient vanished everywhere")?;
    let want = predicted(&report, centre, h);
    if got != want {
        return Err(format!("step {:?} on {h}px: probe {got:?}, analyzer {want:?}", spec.morph_step));
    }
    Ok(())
}

/// Random stack of 1 to 4 windows that keeps a `side` input at least 1px.
/// Kernels are at least the stride: a smaller kernel leaves holes in the
/// field, which is then no longer one interval.
pub fn random_stack(rng: &mut ChaCha8Rng, side: usize) -> Vec<Window> {
    loop {
        let depth = rng.random_range(1..=4);
        let stack: Vec<Window> = (0..depth)
            .map(|_| {
                let stride = rng.random_range(1..=2);
                let kernel = rng.random_range(stride..=5);
                let padding = rng.random_range(0..=kernel / 2);
                Window::new(kernel, stride, padding)
            })
            .collect();
        let mut len = Some(side);
        for w in &stack {
            len = len.and_then(|l| w.output_len(l)).filter(|&l| l > 0);
        }
        if len.is_some() {
            return stack;
        }
    }
}

/// Brute-force `P(s+ > s-) + P(s+ = s-) / 2` over all positive/negative pairs.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    num / pairs
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}
