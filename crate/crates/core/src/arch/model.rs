//! Built networks with role-tagged parameters.

use std::collections::{BTreeMap, BTreeSet};

use archleak_grad::{Graph, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Builder, Ctx};
use super::ladder::Ladder;
use super::spec::{ArchSpec, Family};
use super::vit::Vit;
use crate::error::{Error, Result};

/// Role of a parameter, used to select gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModuleTag {
    Stem,
    Attention,
    MLP,
    Norm,
    Head,
    Other,
}

impl ModuleTag {
    pub const ALL: [ModuleTag; 6] = [
        ModuleTag::Stem,
        ModuleTag::Attention,
        ModuleTag::MLP,
        ModuleTag::Norm,
        ModuleTag::Head,
        ModuleTag::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleTag::Stem => "Stem",
            ModuleTag::Attention => "Attention",
            ModuleTag::MLP => "MLP",
            ModuleTag::Norm => "Norm",
            ModuleTag::Head => "Head",
            ModuleTag::Other => "Other",
        }
    }
}

/// A set of module tags, or every tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    All,
    Tags(BTreeSet<ModuleTag>),
}

impl Selection {
    pub fn only(tag: ModuleTag) -> Self {
        Selection::Tags([tag].into())
    }

    pub fn contains(&self, tag: ModuleTag) -> bool {
        match self {
            Selection::All => true,
            Selection::Tags(t) => t.contains(&tag),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Selection::All => "All".into(),
            Selection::Tags(t) => t.iter().map(|t| t.as_str()).collect::<Vec<_>>().join("+"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub tag: ModuleTag,
    pub shape: Vec<usize>,
}

impl ParamInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm, stochastic depth active.
    Train,
    /// Running statistics, every residual branch kept.
    Eval,
}

#[derive(Debug, Clone)]
pub(crate) enum Net {
    Ladder(Ladder),
    Vit(Vit),
}

/// Result of one forward pass.
pub struct ForwardOutput {
    pub logits: Var,
    /// Penultimate representation: pooled features right before the head.
    pub features: Var,
    /// Updated running statistics `(buffer index, value)` from a training pass.
    pub stat_updates: Vec<(usize, Tensor)>,
}

/// A network whose every parameter carries exactly one [`ModuleTag`].
#[derive(Debug, Clone)]
pub struct TaggedModel {
    pub spec: ArchSpec,
    pub params: Vec<Tensor>,
    pub info: Vec<ParamInfo>,
    pub buffers: Vec<Tensor>,
    pub buffer_names: Vec<String>,
    pub(crate) net: Net,
}

fn layout(spec: &ArchSpec) -> Result<(Net, Builder)> {
    spec.validate()?;
    let mut b = Builder::default();
    let net = match spec.family {
        Family::MorphLadder => Net::Ladder(Ladder::layout(spec, &mut b)?),
        Family::TinyViT => Net::Vit(Vit::layout(spec, &mut b)?),
    };
    Ok((net, b))
}

/// Parameter descriptions of `spec` without allocating any values.
pub fn param_layout(spec: &ArchSpec) -> Result<Vec<ParamInfo>> {
    Ok(layout(spec)?.1.params)
}

/// Per-tag parameter counts computed from the layout.
pub fn count_by_tag(info: &[ParamInfo]) -> BTreeMap<ModuleTag, usize> {
    let mut counts = BTreeMap::new();
    for p in info {
        *counts.entry(p.tag).or_insert(0) += p.numel();
    }
    counts
}

/// Build `spec` with parameters drawn from `seed`.
pub fn build(spec: &ArchSpec, seed: u64) -> Result<TaggedModel> {
    let (net, b) = layout(spec)?;
    let (params, buffers) = b.materialize(seed);
    Ok(TaggedModel {
        spec: spec.clone(),
        params,
        buffer_names: b.buffers.iter().map(|x| x.name.clone()).collect(),
        info: b.params,
        buffers,
        net,
    })
}

impl TaggedModel {
    pub fn num_params(&self) -> usize {
        self.info.iter().map(ParamInfo::numel).sum()
    }

    pub fn tags(&self) -> BTreeMap<String, ModuleTag> {
        self.info.iter().map(|p| (p.name.clone(), p.tag)).collect()
    }

    pub fn param_counts(&self) -> BTreeMap<ModuleTag, usize> {
        count_by_tag(&self.info)
    }

    /// Width of the penultimate representation.
    pub fn feature_dim(&self) -> usize {
        match &self.net {
            Net::Ladder(l) => l.feature_dim,
            Net::Vit(v) => v.dim,
        }
    }

    /// Record the parameters on `graph` as differentiable leaves.
    pub fn param_vars(&self, graph: &Graph) -> Vec<Var> {
        self.params.iter().map(|t| graph.param(t.clone())).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = self.spec.input_shape;
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::shape(format!(
                "model expects [B, {}, {}, {}] input, got {shape:?}",
                want[0], want[1], want[2]
            )));
        }
        Ok(())
    }

    /// Forward pass with `params` (as returned by [`Self::param_vars`]).
    pub fn forward(
        &self,
        graph: &Graph,
        params: &[Var],
        x: &Var,
        mode: Mode,
        drop_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        self.check_input(&x.shape())?;
        let mut ctx = Ctx {
            graph,
            params,
            buffers: &self.buffers,
            mode,
            updates: Vec::new(),
            drop_rng,
        };
        let (features, logits) = match &self.net {
            Net::Ladder(l) => l.forward(&mut ctx, x),
            Net::Vit(v) => v.forward(&mut ctx, x),
        };
        Ok(ForwardOutput { logits, features, stat_updates: ctx.updates })
    }

    /// Spatial feature map before global pooling (ladder only).
    pub fn feature_map(&self, graph: &Graph, params: &[Var], x: &Var, mode: Mode) -> Result<Var> {
        self.check_input(&x.shape())?;
        let Net::Ladder(l) = &self.net else {
            return Err(Error::config("feature maps exist only for ladder models"));
        };
        let mut ctx = Ctx { graph, params, buffers: &self.buffers, mode, updates: Vec::new(), drop_rng: None };
        Ok(l.feature_map(&mut ctx, x))
    }

    /// Eval-mode logits without recording gradients.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.infer(x)?.0)
    }

    /// Eval-mode `(logits, features)` without recording gradients.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = Graph::inference();
        let params: Vec<Var> = self.params.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.forward(&g, &params, &g.constant(x.clone()), Mode::Eval, None)?;
        Ok((out.logits.value(), out.features.value()))
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<(usize, Tensor)>) {
        for (i, t) in updates {
            self.buffers[i] = t;
        }
    }

    /// True when some layer normalizes with batch statistics in training.
    pub fn uses_batch_norm(&self) -> bool {
        self.buffer_names.iter().any(|n| n.ends_with(".running_mean"))
    }

    /// `mask[i]` is true when parameter `i` carries a selected tag.
    pub fn selection_mask(&self, selection: &Selection) -> Vec<bool> {
        self.info.iter().map(|p| selection.contains(p.tag)).collect()
    }

    /// Flattened copy of every parameter, in layout order.
    pub fn flat_params(&self) -> Vec<f32> {
        self.params.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::spec::{spec_for_step, tiny_vit, VitSpec};

    #[test]
    fn ladder_forward_shapes_for_every_step() {
        for step in 1..=14 {
            let spec = spec_for_step(step, 10, [3, 32, 32]).unwrap().desk(8);
            let m = build(&spec, 0).unwrap();
            let x = Tensor::full(&[2, 3, 32, 32], 0.5);
            let (logits, feats) = m.infer(&x).unwrap();
            assert_eq!(logits.shape(), &[2, 10], "step {step}");
            assert_eq!(feats.shape(), &[2, m.feature_dim()], "step {step}");
            assert!(logits.all_finite(), "step {step}");
        }
    }

    #[test]
    fn vit_forward_and_tags() {
        let spec = tiny_vit(
            VitSpec { patch: 4, dim: 64, depth: 4, heads: 4, mlp_ratio: 2.0 },
            10,
            [3, 16, 16],
        );
        let m = build(&spec, 0).unwrap();
        let (logits, feats) = m.infer(&Tensor::full(&[2, 3, 16, 16], 0.2)).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        assert_eq!(feats.shape(), &[2, 64]);
        let counts = m.param_counts();
        for tag in [ModuleTag::Stem, ModuleTag::Attention, ModuleTag::MLP, ModuleTag::Norm, ModuleTag::Head] {
            assert!(counts[&tag] > 0, "{tag:?}");
        }
        assert!(!counts.contains_key(&ModuleTag::Other));
    }

    #[test]
    fn build_is_deterministic() {
        let spec = spec_for_step(12, 10, [3, 16, 16]).unwrap().desk(8);
        let a = build(&spec, 7).unwrap();
        let b = build(&spec, 7).unwrap();
        let c = build(&spec, 8).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn wrong_input_shape_is_a_shape_error() {
        let spec = spec_for_step(12, 10, [3, 16, 16]).unwrap().desk(8);
        let m = build(&spec, 0).unwrap();
        assert!(matches!(m.logits(&Tensor::zeros(&[1, 3, 8, 8])), Err(Error::Shape(_))));
    }

    #[test]
    fn indivisible_patch_is_a_shape_error() {
        let spec = spec_for_step(4, 10, [3, 18, 18]).unwrap().desk(8);
        assert!(matches!(build(&spec, 0), Err(Error::Shape(_))));
        let vit = tiny_vit(
            VitSpec { patch: 4, dim: 16, depth: 1, heads: 2, mlp_ratio: 2.0 },
            10,
            [3, 18, 18],
        );
        assert!(matches!(build(&vit, 0), Err(Error::Shape(_))));
    }
}
