//! The convolutional ladder from ResNet-50 to ConvNeXt-T.

use archleak_grad::nn::{self, Window};
use archleak_grad::Var;

use super::layers::{activate, same_padding, Builder, Conv, Ctx, Init, Linear, Norm};
use super::model::ModuleTag;
use super::spec::{
    Activation, ArchSpec, BlockStyle, NormCount, NormKind, LAYER_SCALE_INIT, STOCHASTIC_DEPTH_RATE,
};
use crate::error::{Error, Result};

/// One convolution or pooling window on the main spatial path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathLayer {
    pub name: String,
    pub window: Window,
}

#[derive(Debug, Clone)]
struct Block {
    convs: [Conv; 3],
    norms: [Option<Norm>; 3],
    shortcut: Option<(Conv, Norm)>,
    layer_scale: Option<usize>,
    drop_prob: f32,
}

#[derive(Debug, Clone)]
struct Downsample {
    norm: Norm,
    conv: Conv,
}

#[derive(Debug, Clone)]
pub(crate) struct Ladder {
    stem: Conv,
    stem_norm: Norm,
    stem_pool: bool,
    stages: Vec<(Option<Downsample>, Vec<Block>)>,
    head_norm: Option<Norm>,
    head: Linear,
    activation: Activation,
    mask: [bool; 3],
    pub feature_dim: usize,
    pub path: Vec<PathLayer>,
}

const STEM_POOL: Window = Window::new(3, 2, 1);

struct Geometry {
    h: usize,
    w: usize,
}

impl Geometry {
    fn apply(&mut self, win: Window, what: &str) -> Result<()> {
        match (win.output_len(self.h), win.output_len(self.w)) {
            (Some(h), Some(w)) if h > 0 && w > 0 => {
                self.h = h;
                self.w = w;
                Ok(())
            }
            _ => Err(Error::shape(format!(
                "{what}: a {k}x{k} stride-{s} window does not fit a {}x{} map; \
                 use a larger input",
                self.h,
                self.w,
                k = win.kernel,
                s = win.stride
            ))),
        }
    }
}

impl Ladder {
    pub fn layout(spec: &ArchSpec, b: &mut Builder) -> Result<Ladder> {
        let [cin, h, w] = spec.input_shape;
        let mut geo = Geometry { h, w };
        let mut path = Vec::new();
        let c0 = spec.stage_channels[0];

        let (k, s) = (spec.stem.kernel, spec.stem.stride);
        if k == s && (h % s != 0 || w % s != 0) {
            return Err(Error::shape(format!(
                "input {h}x{w} is not divisible by the {k}x{k} stride-{s} patchify stem"
            )));
        }
        let stem_win = Window::new(k, s, same_padding(k, s));
        let stem = b.conv("stem.conv", ModuleTag::Stem, cin, c0, stem_win, false, spec.conv_bias);
        let stem_norm = b.norm("stem.norm", ModuleTag::Stem, c0, spec.norm);
        geo.apply(stem_win, "stem")?;
        path.push(PathLayer { name: "stem.conv".into(), window: stem_win });
        if spec.stem.maxpool {
            geo.apply(STEM_POOL, "stem max pool")?;
            path.push(PathLayer { name: "stem.pool".into(), window: STEM_POOL });
        }

        let total_blocks: usize = spec.stage_depths.iter().sum();
        let mut block_index = 0;
        let mut in_ch = c0;
        let mut stages = Vec::new();
        for (si, (&depth, &c)) in spec.stage_depths.iter().zip(&spec.stage_channels).enumerate() {
            let mut down = None;
            if spec.separate_downsample && si > 0 {
                let name = format!("stages.{si}.down");
                let norm = b.norm(&format!("{name}.norm"), ModuleTag::Norm, in_ch, NormKind::LayerNorm);
                let win = Window::new(2, 2, 0);
                if geo.h % 2 != 0 || geo.w % 2 != 0 {
                    return Err(Error::shape(format!(
                        "stage {si} downsampling needs an even map, got {}x{}",
                        geo.h, geo.w
                    )));
                }
                let conv = b.conv(&format!("{name}.conv"), ModuleTag::Other, in_ch, c, win, false, spec.conv_bias);
                geo.apply(win, &name)?;
                path.push(PathLayer { name: format!("{name}.conv"), window: win });
                down = Some(Downsample { norm, conv });
                in_ch = c;
            }
            let mut blocks = Vec::new();
            for bi in 0..depth {
                let stride = if !spec.separate_downsample && si > 0 && bi == 0 { 2 } else { 1 };
                let drop_prob = if spec.stochastic_depth && total_blocks > 1 {
                    STOCHASTIC_DEPTH_RATE * block_index as f32 / (total_blocks - 1) as f32
                } else if spec.stochastic_depth {
                    STOCHASTIC_DEPTH_RATE
                } else {
                    0.0
                };
                let name = format!("stages.{si}.blocks.{bi}");
                let (block, out) =
                    layout_block(spec, b, &name, in_ch, c, stride, drop_prob, &mut geo, &mut path)?;
                blocks.push(block);
                in_ch = out;
                block_index += 1;
            }
            stages.push((down, blocks));
        }

        let head_norm = (spec.norm == NormKind::LayerNorm)
            .then(|| b.norm("head.norm", ModuleTag::Head, in_ch, NormKind::LayerNorm));
        let bound = 1.0 / (in_ch as f32).sqrt();
        let head = b.linear("head.fc", ModuleTag::Head, in_ch, spec.num_classes, Init::Uniform(bound));
        Ok(Ladder {
            stem,
            stem_norm,
            stem_pool: spec.stem.maxpool,
            stages,
            head_norm,
            head,
            activation: spec.activation,
            mask: spec.activation_mask,
            feature_dim: in_ch,
            path,
        })
    }

    pub fn feature_map(&self, ctx: &mut Ctx<'_>, x: &Var) -> Var {
        let mut h = ctx.conv(&self.stem, x);
        h = ctx.norm2d(&self.stem_norm, &h);
        if self.stem_pool {
            h = activate(self.activation, &h);
            h = nn::max_pool2d(&h, STEM_POOL);
        }
        for (down, blocks) in &self.stages {
            if let Some(d) = down {
                h = ctx.norm2d(&d.norm, &h);
                h = ctx.conv(&d.conv, &h);
            }
            for block in blocks {
                h = self.block_forward(ctx, block, &h);
            }
        }
        h
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Var) -> (Var, Var) {
        let map = self.feature_map(ctx, x);
        let features = nn::global_avg_pool(&map);
        let mut z = features.clone();
        if let Some(n) = &self.head_norm {
            z = ctx.norm_last(n, &z);
        }
        let logits = ctx.linear(&self.head, &z);
        (features, logits)
    }

    fn block_forward(&self, ctx: &mut Ctx<'_>, block: &Block, x: &Var) -> Var {
        let mut h = x.clone();
        for i in 0..3 {
            h = ctx.conv(&block.convs[i], &h);
            if let Some(n) = &block.norms[i] {
                h = ctx.norm2d(n, &h);
            }
            if i < 2 && self.mask[i] {
                h = activate(self.activation, &h);
            }
        }
        if let Some(gamma) = block.layer_scale {
            let c = h.shape()[1];
            h = h.mul(&ctx.p(gamma).reshape(&[1, c, 1, 1]));
        }
        if let Some(mask) = ctx.drop_mask(x.shape()[0], block.drop_prob) {
            h = h.mul(&mask);
        }
        let skip = match &block.shortcut {
            Some((conv, norm)) => {
                let s = ctx.conv(conv, x);
                ctx.norm2d(norm, &s)
            }
            None => x.clone(),
        };
        let mut y = skip.add(&h);
        if self.mask[2] {
            y = activate(self.activation, &y);
        }
        y
    }
}

#[allow(clippy::too_many_arguments)]
fn layout_block(
    spec: &ArchSpec,
    b: &mut Builder,
    name: &str,
    in_ch: usize,
    c: usize,
    stride: usize,
    drop_prob: f32,
    geo: &mut Geometry,
    path: &mut Vec<PathLayer>,
) -> Result<(Block, usize)> {
    let k = spec.block_kernel;
    let spatial = Window::new(k, stride, k / 2);
    let point = Window::new(1, 1, 0);
    // (cin, cout, window, depthwise) for the three convolutions
    let plan: [(usize, usize, Window, bool); 3] = match spec.block_style {
        BlockStyle::Bottleneck => [
            (in_ch, c, point, false),
            (c, c, spatial, false),
            (c, 4 * c, point, false),
        ],
        BlockStyle::DepthwiseBottleneck => [
            (in_ch, c, point, false),
            (c, c, spatial, true),
            (c, 4 * c, point, false),
        ],
        BlockStyle::InvertedDepthwise => [
            (in_ch, 4 * c, point, false),
            (4 * c, 4 * c, spatial, true),
            (4 * c, c, point, false),
        ],
        BlockStyle::ConvNeXtBlock => [
            (in_ch, in_ch, spatial, true),
            (in_ch, 4 * c, point, false),
            (4 * c, c, point, false),
        ],
    };
    let out = plan[2].1;
    let mut convs = Vec::with_capacity(3);
    let mut norms = [None; 3];
    for (i, &(ci, co, win, dw)) in plan.iter().enumerate() {
        let conv_name = format!("{name}.conv{}", i + 1);
        convs.push(b.conv(&conv_name, ModuleTag::Other, ci, co, win, dw, spec.conv_bias));
        geo.apply(win, &conv_name)?;
        path.push(PathLayer { name: conv_name, window: win });
        if i == 0 || spec.norm_count == NormCount::Full {
            norms[i] = Some(b.norm(&format!("{name}.norm{}", i + 1), ModuleTag::Norm, co, spec.norm));
        }
    }
    let shortcut = (stride != 1 || in_ch != out).then(|| {
        let conv = b.conv(
            &format!("{name}.shortcut.conv"),
            ModuleTag::Other,
            in_ch,
            out,
            Window::new(1, stride, 0),
            false,
            spec.conv_bias,
        );
        let norm = b.norm(&format!("{name}.shortcut.norm"), ModuleTag::Norm, out, spec.norm);
        (conv, norm)
    });
    let layer_scale = spec.layer_scale.then(|| {
        b.param(format!("{name}.layer_scale"), ModuleTag::Other, vec![out], Init::Const(LAYER_SCALE_INIT))
    });
    let convs: [Conv; 3] = convs.try_into().expect("three convolutions");
    Ok((Block { convs, norms, shortcut, layer_scale, drop_prob }, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::model::{build, param_layout};
    use crate::arch::spec::spec_for_step;

    #[test]
    fn full_size_resnet50_parameter_count() {
        // torchvision resnet50 with a 10-way head has 23,528,522 parameters
        let spec = spec_for_step(1, 10, [3, 224, 224]).unwrap();
        let info = param_layout(&spec).unwrap();
        let total: usize = info.iter().map(|p| p.numel()).sum();
        assert_eq!(total, 23_528_522);
    }

    #[test]
    fn step_thirteen_needs_room_for_downsampling() {
        let spec = spec_for_step(13, 10, [3, 16, 16]).unwrap().desk(8);
        assert!(matches!(build(&spec, 0), Err(Error::Shape(_))));
        let spec = spec_for_step(13, 10, [3, 32, 32]).unwrap().desk(8);
        assert!(build(&spec, 0).is_ok());
    }

    #[test]
    fn step_one_block_layout() {
        let spec = spec_for_step(1, 10, [3, 32, 32]).unwrap().desk(8);
        let m = build(&spec, 0).unwrap();
        let names: Vec<&str> = m.info.iter().map(|p| p.name.as_str()).collect();
        assert!(names.contains(&"stages.0.blocks.0.conv2.weight"));
        assert!(names.contains(&"stages.0.blocks.0.shortcut.conv.weight"));
        assert!(!names.iter().any(|n| n.ends_with(".bias") && n.contains("conv")));
        assert_eq!(m.feature_dim(), 4 * 64);
    }
}
