//! Declarative architecture descriptions and the ResNet-to-ConvNeXt ladder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    MorphLadder,
    TinyViT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockStyle {
    /// `1x1 c -> kxk c -> 1x1 4c`
    Bottleneck,
    /// `1x1 c -> depthwise kxk c -> 1x1 4c`
    DepthwiseBottleneck,
    /// `1x1 4c -> depthwise kxk 4c -> 1x1 c`
    InvertedDepthwise,
    /// `depthwise kxk -> 1x1 4c -> 1x1 c`
    ConvNeXtBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    ReLU,
    GELU,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormKind {
    BatchNorm,
    LayerNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormCount {
    /// A norm after each of the three block convolutions.
    Full,
    /// A single norm after the first block convolution.
    Reduced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub kernel: usize,
    pub stride: usize,
    /// 3x3 stride-2 max pooling after the stem. The stem activation sits
    /// right before it and is present exactly when the pool is.
    pub maxpool: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitSpec {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f32,
}

/// Everything needed to build one network deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub morph_step: Option<u8>,
    pub stage_depths: [usize; 4],
    pub stage_channels: [usize; 4],
    pub stem: StemSpec,
    pub block_style: BlockStyle,
    pub block_kernel: usize,
    pub activation: Activation,
    /// Activations after block conv 1, block conv 2 and the residual add.
    pub activation_mask: [bool; 3],
    pub norm: NormKind,
    pub norm_count: NormCount,
    pub conv_bias: bool,
    pub separate_downsample: bool,
    pub stochastic_depth: bool,
    pub layer_scale: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vit: Option<VitSpec>,
    pub num_classes: usize,
    /// `(channels, height, width)`
    pub input_shape: [usize; 3],
}

/// Drop probability of the deepest block when stochastic depth is on.
pub const STOCHASTIC_DEPTH_RATE: f32 = 0.1;
/// Patch side used for the stem-width floor of [`ArchSpec::desk`].
pub const DESK_PATCH: usize = 4;
/// Initial value of the per-channel layer-scale gains.
pub const LAYER_SCALE_INIT: f32 = 1e-6;

/// Fields each ladder step is allowed to change relative to its predecessor.
pub fn documented_changes(step: u8) -> &'static [&'static str] {
    match step {
        2 => &["stage_channels"],
        3 => &["stage_depths"],
        4 => &["stem"],
        5 => &["block_style"],
        6 => &["block_style"],
        7 => &["block_style", "block_kernel"],
        8 => &["stem"],
        9 => &["activation"],
        10 => &["activation_mask"],
        11 => &["norm_count"],
        12 => &["norm", "conv_bias"],
        13 => &["separate_downsample"],
        14 => &["stochastic_depth", "layer_scale"],
        _ => &[],
    }
}

/// The ladder spec at `step` (1 = ResNet-50, 14 = ConvNeXt-T), full size.
pub fn spec_for_step(step: u8, num_classes: usize, input_shape: [usize; 3]) -> Result<ArchSpec> {
    if !(1..=14).contains(&step) {
        return Err(Error::domain(format!("morph step {step} outside 1..=14")));
    }
    let mut s = ArchSpec {
        family: Family::MorphLadder,
        morph_step: Some(1),
        stage_depths: [3, 4, 6, 3],
        stage_channels: [64, 128, 256, 512],
        stem: StemSpec { kernel: 7, stride: 2, maxpool: true },
        block_style: BlockStyle::Bottleneck,
        block_kernel: 3,
        activation: Activation::ReLU,
        activation_mask: [true, true, true],
        norm: NormKind::BatchNorm,
        norm_count: NormCount::Full,
        conv_bias: false,
        separate_downsample: false,
        stochastic_depth: false,
        layer_scale: false,
        vit: None,
        num_classes,
        input_shape,
    };
    for k in 2..=step {
        s.morph_step = Some(k);
        match k {
            2 => s.stage_channels = [96, 192, 384, 768],
            3 => s.stage_depths = [3, 3, 9, 3],
            4 => s.stem = StemSpec { kernel: 4, stride: 4, maxpool: true },
            5 => s.block_style = BlockStyle::DepthwiseBottleneck,
            6 => s.block_style = BlockStyle::InvertedDepthwise,
            7 => {
                s.block_style = BlockStyle::ConvNeXtBlock;
                s.block_kernel = 7;
            }
            8 => s.stem.maxpool = false,
            9 => s.activation = Activation::GELU,
            10 => s.activation_mask = [false, true, false],
            11 => s.norm_count = NormCount::Reduced,
            12 => {
                s.norm = NormKind::LayerNorm;
                s.conv_bias = true;
            }
            13 => s.separate_downsample = true,
            14 => {
                s.stochastic_depth = true;
                s.layer_scale = true;
            }
            _ => unreachable!(),
        }
    }
    Ok(s)
}

/// A small ViT: patch embedding, class token, learned positions.
pub fn tiny_vit(vit: VitSpec, num_classes: usize, input_shape: [usize; 3]) -> ArchSpec {
    ArchSpec {
        family: Family::TinyViT,
        morph_step: None,
        stage_depths: [1, 1, 1, 1],
        stage_channels: [vit.dim; 4],
        stem: StemSpec { kernel: vit.patch, stride: vit.patch, maxpool: false },
        block_style: BlockStyle::ConvNeXtBlock,
        block_kernel: 1,
        activation: Activation::GELU,
        activation_mask: [false, true, false],
        norm: NormKind::LayerNorm,
        norm_count: NormCount::Reduced,
        conv_bias: true,
        separate_downsample: false,
        stochastic_depth: false,
        layer_scale: false,
        vit: Some(vit),
        num_classes,
        input_shape,
    }
}

impl ArchSpec {
    /// Desk-scale variant of a ladder spec: one block per stage and widths
    /// divided by `width_divisor`. Every ladder-distinguishing field is kept.
    ///
    /// The first stage never drops below the size of one 4x4 input patch
    /// (48 for RGB), capped at its full width. A narrower patchify stem
    /// cannot span its patches, which full-size models always do.
    pub fn desk(mut self, width_divisor: usize) -> Self {
        if self.family == Family::MorphLadder {
            self.stage_depths = [1, 1, 1, 1];
            let full0 = self.stage_channels[0];
            for c in &mut self.stage_channels {
                *c = (*c / width_divisor.max(1)).max(1);
            }
            let floor = (self.input_shape[0] * DESK_PATCH * DESK_PATCH).min(full0);
            self.stage_channels[0] = self.stage_channels[0].max(floor);
        }
        self
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::util::sha256_json(self)
    }

    /// Names of top-level fields that differ, `morph_step` excluded.
    pub fn diff(&self, other: &ArchSpec) -> Vec<String> {
        let a = serde_json::to_value(self).expect("spec serializes");
        let b = serde_json::to_value(other).expect("spec serializes");
        let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
        let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .filter(|k| k.as_str() != "morph_step" && a.get(*k) != b.get(*k))
            .cloned()
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes to toml")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ArchSpec =
            toml::from_str(text).map_err(|e| Error::config(format!("arch spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Structural checks that do not depend on the input geometry.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::config("input_shape entries must be positive"));
        }
        match self.family {
            Family::MorphLadder => {
                if self.stage_depths.iter().chain(&self.stage_channels).any(|&v| v == 0) {
                    return Err(Error::config("stage depths and channels must be positive"));
                }
                if let Some(step) = self.morph_step {
                    if !(1..=14).contains(&step) {
                        return Err(Error::config(format!("morph_step {step} outside 1..=14")));
                    }
                }
                if self.vit.is_some() {
                    return Err(Error::config("ladder spec carries a vit block"));
                }
                if self.stem.kernel == 0 || self.stem.stride == 0 || self.block_kernel == 0 {
                    return Err(Error::config("kernels and strides must be positive"));
                }
            }
            Family::TinyViT => {
                let vit = self
                    .vit
                    .ok_or_else(|| Error::config("TinyViT spec without a vit block"))?;
                if vit.patch == 0 || vit.dim == 0 || vit.depth == 0 || vit.heads == 0 {
                    return Err(Error::config("vit fields must be positive"));
                }
                if vit.dim % vit.heads != 0 {
                    return Err(Error::config(format!(
                        "vit dim {} not divisible by {} heads",
                        vit.dim, vit.heads
                    )));
                }
                if vit.mlp_ratio <= 0.0 {
                    return Err(Error::config("vit mlp_ratio must be positive"));
                }
            }
        }
        Ok(())
    }
}
