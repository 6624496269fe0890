//! A small vision transformer with global multi-head attention.

use archleak_grad::nn::{self, Window};
use archleak_grad::Var;

use super::layers::{same_padding, Builder, Conv, Ctx, Init, Linear, Norm};
use super::model::ModuleTag;
use super::spec::{ArchSpec, NormKind};
use crate::error::{Error, Result};

const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone)]
struct VitBlock {
    norm1: Norm,
    qkv: Linear,
    proj: Linear,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct Vit {
    patch: Conv,
    cls: usize,
    pos: usize,
    blocks: Vec<VitBlock>,
    norm: Norm,
    head: Linear,
    heads: usize,
    pub dim: usize,
    pub tokens: usize,
}

impl Vit {
    pub fn layout(spec: &ArchSpec, b: &mut Builder) -> Result<Vit> {
        let vit = spec.vit.expect("validated TinyViT spec");
        let [cin, h, w] = spec.input_shape;
        if h % vit.patch != 0 || w % vit.patch != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} is not divisible by patch size {}",
                vit.patch
            )));
        }
        let tokens = (h / vit.patch) * (w / vit.patch);
        let dim = vit.dim;
        let hidden = ((dim as f32) * vit.mlp_ratio).round().max(1.0) as usize;
        let tn = Init::TruncNormal(INIT_STD);

        let win = Window::new(vit.patch, vit.patch, same_padding(vit.patch, vit.patch));
        let patch = Conv {
            weight: b.param("stem.patch.weight".into(), ModuleTag::Stem, vec![dim, cin, vit.patch, vit.patch], tn),
            bias: Some(b.param("stem.patch.bias".into(), ModuleTag::Stem, vec![dim], Init::Const(0.0))),
            window: win,
            depthwise: false,
        };
        let cls = b.param("stem.cls_token".into(), ModuleTag::Stem, vec![1, 1, dim], tn);
        let pos = b.param("stem.pos_embed".into(), ModuleTag::Stem, vec![1, tokens + 1, dim], tn);

        let blocks = (0..vit.depth)
            .map(|i| {
                let n = format!("blocks.{i}");
                VitBlock {
                    norm1: b.norm(&format!("{n}.norm1"), ModuleTag::Norm, dim, NormKind::LayerNorm),
                    qkv: b.linear(&format!("{n}.attn.qkv"), ModuleTag::Attention, dim, 3 * dim, tn),
                    proj: b.linear(&format!("{n}.attn.proj"), ModuleTag::Attention, dim, dim, tn),
                    norm2: b.norm(&format!("{n}.norm2"), ModuleTag::Norm, dim, NormKind::LayerNorm),
                    fc1: b.linear(&format!("{n}.mlp.fc1"), ModuleTag::MLP, dim, hidden, tn),
                    fc2: b.linear(&format!("{n}.mlp.fc2"), ModuleTag::MLP, hidden, dim, tn),
                }
            })
            .collect();
        let norm = b.norm("head.norm", ModuleTag::Head, dim, NormKind::LayerNorm);
        let head = b.linear("head.fc", ModuleTag::Head, dim, spec.num_classes, tn);
        Ok(Vit { patch, cls, pos, blocks, norm, head, heads: vit.heads, dim, tokens })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Var) -> (Var, Var) {
        let batch = x.shape()[0];
        let (d, t) = (self.dim, self.tokens + 1);
        let patches = ctx
            .conv(&self.patch, x)
            .reshape(&[batch, d, self.tokens])
            .permute(&[0, 2, 1]);
        let cls = ctx.p(self.cls).broadcast_to(&[batch, 1, d]);
        let mut z = Var::cat(&[cls, patches], 1).add(ctx.p(self.pos));
        let hd = d / self.heads;
        for blk in &self.blocks {
            let h = ctx.norm_last(&blk.norm1, &z);
            let qkv = ctx
                .linear(&blk.qkv, &h)
                .reshape(&[batch, t, 3, self.heads, hd])
                .permute(&[2, 0, 3, 1, 4]);
            let part = |i: usize| qkv.narrow(0, i, 1).reshape(&[batch, self.heads, t, hd]);
            let att = nn::attention(&part(0), &part(1), &part(2))
                .permute(&[0, 2, 1, 3])
                .reshape(&[batch, t, d]);
            z = z.add(&ctx.linear(&blk.proj, &att));
            let h = ctx.norm_last(&blk.norm2, &z);
            let h = ctx.linear(&blk.fc2, &nn::gelu(&ctx.linear(&blk.fc1, &h)));
            z = z.add(&h);
        }
        let z = ctx.norm_last(&self.norm, &z);
        let features = z.narrow(1, 0, 1).reshape(&[batch, d]);
        let logits = ctx.linear(&self.head, &features);
        (features, logits)
    }
}

#[cfg(test)]
mod tests {
    use crate::arch::model::{count_by_tag, param_layout, ModuleTag};
    use crate::arch::spec::{tiny_vit, VitSpec};

    /// ViT-B/16 on 32x32 inputs with a 10-way head: exact per-tag totals.
    #[test]
    fn vit_b_parameter_split() {
        let spec = tiny_vit(
            VitSpec { patch: 16, dim: 768, depth: 12, heads: 12, mlp_ratio: 4.0 },
            10,
            [3, 32, 32],
        );
        let info = param_layout(&spec).unwrap();
        let counts = count_by_tag(&info);
        assert_eq!(counts[&ModuleTag::Stem], 595_200);
        assert_eq!(counts[&ModuleTag::Attention], 28_348_416);
        assert_eq!(counts[&ModuleTag::MLP], 56_669_184);
        assert_eq!(counts[&ModuleTag::Norm], 36_864);
        assert_eq!(counts[&ModuleTag::Head], 9_226);
        let total: usize = counts.values().sum();
        assert_eq!(total, 85_658_890);
        let layers = |t: ModuleTag| info.iter().filter(|p| p.tag == t).count();
        assert_eq!(
            [ModuleTag::Stem, ModuleTag::Attention, ModuleTag::MLP, ModuleTag::Norm, ModuleTag::Head]
                .map(layers),
            [4, 48, 48, 48, 4]
        );
    }
}
