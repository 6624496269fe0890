//! Supervised training of tagged models.

use archleak_grad::{nn, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::recipe::{RecipeConfig, Schedule};
use super::split::SplitPlan;
use crate::arch::{Mode, TaggedModel};
use crate::defense::{dp_step, DpConfig};
use crate::error::{Error, Result};
use crate::exec;
use crate::optim::{cosine_lr, Optimizer};

/// Independent random streams derived from one training seed.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Order = 1,
    Augment = 2,
    DropPath = 3,
    Noise = 4,
}

fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s as u64);
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedVictim {
    pub model: TaggedModel,
    pub recipe: RecipeConfig,
    pub split: Option<SplitPlan>,
    pub seed: u64,
    pub dp: Option<DpConfig>,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// Train-minus-test accuracy.
pub fn overfitting_level(v: &TrainedVictim) -> Result<f64> {
    let test = v.test_acc.ok_or_else(|| Error::config("overfitting level needs a test accuracy"))?;
    Ok(v.train_acc - test)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    pub test: Option<&'a Dataset>,
    pub dp: Option<DpConfig>,
    pub split: Option<SplitPlan>,
    /// Skip the per-epoch accuracy passes; only the final epoch is scored.
    pub final_eval_only: bool,
}

pub const EVAL_BATCH: usize = 128;

/// Eval-mode logits for a whole dataset.
pub fn predict_logits(model: &TaggedModel, data: &Dataset) -> Result<Tensor> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(EVAL_BATCH).collect();
    let mut out = Vec::with_capacity(data.len() * model.spec.num_classes);
    for c in chunks {
        out.extend_from_slice(model.logits(&data.batch(c))?.data());
    }
    Ok(Tensor::new(vec![data.len(), model.spec.num_classes], out))
}

pub fn accuracy_on(model: &TaggedModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::domain("accuracy of an empty dataset"));
    }
    let pred = predict_logits(model, data)?.argmax_last();
    let hits = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Soft targets for a batch, with label smoothing applied.
fn targets(labels: &[usize], classes: usize, smoothing: Option<f32>) -> Tensor {
    let t = nn::one_hot(labels, classes);
    match smoothing {
        Some(e) if e > 0.0 => t.map(move |v| v * (1.0 - e) + e / classes as f32),
        _ => t,
    }
}

/// Mix each example with a partner from a random permutation: blend the
/// images (mixup) or paste a box (cutmix); targets follow the pixel share.
fn mix_batch(x: &Tensor, y: &Tensor, alpha: f32, cut: bool, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
    let s = x.shape().to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::config(e.to_string()))?;
    let mut lam: f32 = beta.sample(rng);
    let mut perm: Vec<usize> = (0..b).collect();
    perm.shuffle(rng);
    let xd = x.data();
    let mut out = xd.to_vec();
    let img = c * h * w;
    if cut {
        let ratio = (1.0 - lam).sqrt();
        let (ch, cw) = ((h as f32 * ratio) as usize, (w as f32 * ratio) as usize);
        let (cy, cx) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y0, y1) = (cy.saturating_sub(ch / 2), (cy + ch / 2).min(h));
        let (x0, x1) = (cx.saturating_sub(cw / 2), (cx + cw / 2).min(w));
        for i in 0..b {
            for k in 0..c {
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let off = k * h * w + yy * w + xx;
                        out[i * img + off] = xd[perm[i] * img + off];
                    }
                }
            }
        }
        lam = 1.0 - ((y1 - y0) * (x1 - x0)) as f32 / (h * w) as f32;
    } else {
        for i in 0..b {
            for j in 0..img {
                out[i * img + j] = lam * xd[i * img + j] + (1.0 - lam) * xd[perm[i] * img + j];
            }
        }
    }
    let k = y.shape()[1];
    let yd = y.data();
    let ym: Vec<f32> = (0..b * k)
        .map(|n| {
            let (i, j) = (n / k, n % k);
            lam * yd[i * k + j] + (1.0 - lam) * yd[perm[i] * k + j]
        })
        .collect();
    Ok((Tensor::new(s, out), Tensor::new(vec![b, k], ym)))
}

/// Per-batch inputs and targets after augmentation.
pub struct PreparedBatch {
    pub x: Tensor,
    pub y: Tensor,
    pub indices: Vec<usize>,
}

/// Batches of one epoch, in training order.
pub fn epoch_batches(
    data: &Dataset,
    recipe: &RecipeConfig,
    order: &mut ChaCha8Rng,
    aug: &mut ChaCha8Rng,
) -> Result<Vec<PreparedBatch>> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(order);
    let mut out = Vec::new();
    for (bi, chunk) in idx.chunks(recipe.batch_size).enumerate() {
        let x = data.batch(chunk);
        let y = targets(&data.labels_at(chunk), data.num_classes, recipe.label_smoothing);
        let pick = match (recipe.mixup, recipe.cutmix) {
            (Some(a), Some(b)) => Some(if bi % 2 == 0 { (a, false) } else { (b, true) }),
            (Some(a), None) => Some((a, false)),
            (None, Some(b)) => Some((b, true)),
            (None, None) => None,
        };
        let (x, y) = match pick {
            Some((alpha, cut)) => mix_batch(&x, &y, alpha, cut, aug)?,
            None => (x, y),
        };
        out.push(PreparedBatch { x, y, indices: chunk.to_vec() });
    }
    Ok(out)
}

pub fn train(model: TaggedModel, data: &Dataset, recipe: &RecipeConfig, seed: u64) -> Result<TrainedVictim> {
    train_with(model, data, recipe, seed, &TrainOptions::default())
}

pub fn train_with(
    mut model: TaggedModel,
    data: &Dataset,
    recipe: &RecipeConfig,
    seed: u64,
    opts: &TrainOptions,
) -> Result<TrainedVictim> {
    recipe.validate()?;
    if data.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    if data.image_shape() != model.spec.input_shape {
        return Err(Error::shape(format!(
            "data images are {:?}, model expects {:?}",
            data.image_shape(),
            model.spec.input_shape
        )));
    }
    if let Some(dp) = &opts.dp {
        dp.validate()?;
        if model.uses_batch_norm() {
            return Err(Error::config("per-example gradients are undefined with batch-norm statistics"));
        }
        if recipe.mixup.is_some() || recipe.cutmix.is_some() {
            return Err(Error::config("DP training mixes no examples; switch mixup and cutmix off"));
        }
    }
    let sizes: Vec<usize> = model.params.iter().map(Tensor::numel).collect();
    let mut opt = Optimizer::new(recipe.optimizer_settings(), &sizes);
    let mut order = stream(seed, Stream::Order);
    let mut aug = stream(seed, Stream::Augment);
    let mut drop = stream(seed, Stream::DropPath);
    let mut noise = stream(opts.dp.as_ref().map_or(seed, |d| d.seed), Stream::Noise);
    let tags: Vec<_> = model.info.iter().map(|p| p.tag).collect();

    let mut history = Vec::with_capacity(recipe.epochs);
    for epoch in 0..recipe.epochs {
        let lr = match recipe.schedule {
            Schedule::CosineAnnealing => cosine_lr(recipe.lr, epoch, recipe.epochs),
            Schedule::None => recipe.lr,
        };
        let mut loss_sum = 0.0f64;
        let batches = epoch_batches(data, recipe, &mut order, &mut aug)?;
        for b in &batches {
            let (loss, grads) = match &opts.dp {
                None => {
                    let g = Graph::new();
                    let params = model.param_vars(&g);
                    let out = model.forward(&g, &params, &g.constant(b.x.clone()), Mode::Train, Some(&mut drop))?;
                    let loss = nn::cross_entropy(&out.logits, &b.y);
                    let grads: Vec<Tensor> = g.grad(&loss, &params, false).iter().map(|v| v.value()).collect();
                    model.apply_stat_updates(out.stat_updates);
                    (loss.item() as f64, grads)
                }
                Some(dp) => {
                    let n = b.indices.len();
                    let per = exec::try_map_indexed(n, |i| per_example_gradient(&model, b, i))?;
                    let loss = per.iter().map(|p| p.0).sum::<f64>() / n as f64;
                    let grads: Vec<Vec<Tensor>> = per.into_iter().map(|p| p.1).collect();
                    (loss, dp_step(&grads, &tags, dp, &mut noise)?.gradient)
                }
            };
            if !loss.is_finite() {
                return Err(Error::Training { epoch, reason: format!("loss is {loss}") });
            }
            loss_sum += loss * b.indices.len() as f64;
            let mut bufs: Vec<Vec<f32>> = std::mem::take(&mut model.params).into_iter().map(Tensor::into_vec).collect();
            let grefs: Vec<&[f32]> = grads.iter().map(Tensor::data).collect();
            opt.step(&mut bufs, &grefs, lr);
            model.params = bufs
                .into_iter()
                .zip(&model.info)
                .map(|(v, p)| Tensor::new(p.shape.clone(), v))
                .collect();
            if model.params.iter().any(|t| !t.all_finite()) {
                return Err(Error::Training { epoch, reason: "parameters became non-finite".into() });
            }
        }
        let last = epoch + 1 == recipe.epochs;
        let (train_acc, test_acc) = if last || !opts.final_eval_only {
            (accuracy_on(&model, data)?, opts.test.map(|t| accuracy_on(&model, t)).transpose()?)
        } else {
            (f64::NAN, None)
        };
        tracing::debug!(epoch, loss = loss_sum / data.len() as f64, train_acc, "epoch done");
        history.push(EpochRecord { epoch, loss: loss_sum / data.len() as f64, train_acc, test_acc });
    }
    let last = *history.last().expect("at least one epoch");
    Ok(TrainedVictim {
        model,
        recipe: recipe.clone(),
        split: opts.split.clone(),
        seed,
        dp: opts.dp.clone(),
        train_acc: last.train_acc,
        test_acc: last.test_acc,
        history,
    })
}

/// Loss and parameter gradients of example `i` of a batch, on its own.
fn per_example_gradient(model: &TaggedModel, b: &PreparedBatch, i: usize) -> Result<(f64, Vec<Tensor>)> {
    let s = b.x.shape();
    let img: usize = s[1..].iter().product();
    let k = b.y.shape()[1];
    let mut shape = s.to_vec();
    shape[0] = 1;
    let x = Tensor::new(shape, b.x.data()[i * img..(i + 1) * img].to_vec());
    let y = Tensor::new(vec![1, k], b.y.data()[i * k..(i + 1) * k].to_vec());
    let g = Graph::new();
    let params = model.param_vars(&g);
    let out = model.forward(&g, &params, &g.constant(x), Mode::Train, None)?;
    let loss = nn::cross_entropy(&out.logits, &y);
    let grads = g.grad(&loss, &params, false).iter().map(|v| v.value()).collect();
    Ok((loss.item() as f64, grads))
}
