//! Receptive-field analysis of the convolutional path.

use archleak_grad::nn::Window;
use serde::{Deserialize, Serialize};

use super::model::{build, Net};
use super::spec::{ArchSpec, Family};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerField {
    pub index: usize,
    pub name: String,
    pub kernel: usize,
    pub stride: usize,
    /// Field, in input pixels, of one unit at this layer's output.
    pub field: usize,
    /// Input-pixel distance between neighbouring units of this layer's output.
    pub jump: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveFieldReport {
    pub per_layer: Vec<LayerField>,
    /// Pixels per axis seen by one unit of the final map.
    pub total: usize,
    /// Product of all strides.
    pub jump: usize,
    /// Accumulated padding: output unit `i` starts at input `i * jump - offset`.
    pub offset: usize,
    /// True for attention models, whose field is the whole input.
    pub attention_global: bool,
}

impl ReceptiveFieldReport {
    /// Input interval `[first, last]` of output unit `i`, before clipping.
    pub fn window_of(&self, i: usize) -> (isize, isize) {
        let first = (i * self.jump) as isize - self.offset as isize;
        (first, first + self.total as isize - 1)
    }
}

/// Backward recursion `R_{i-1} = s_i R_i + (k_i - s_i)` from `R_n = 1`.
pub fn backward_recursion(layers: &[Window]) -> usize {
    layers
        .iter()
        .rev()
        .fold(1usize, |r, w| w.stride * r + w.kernel - w.stride)
}

/// Field of a sequential stack of windows.
pub fn receptive_field_of_stack(layers: &[(String, Window)]) -> ReceptiveFieldReport {
    let mut per_layer = Vec::with_capacity(layers.len());
    let (mut field, mut jump, mut offset) = (1usize, 1usize, 0usize);
    for (index, (name, w)) in layers.iter().enumerate() {
        field += (w.kernel - 1) * jump;
        offset += w.padding * jump;
        jump *= w.stride;
        per_layer.push(LayerField {
            index,
            name: name.clone(),
            kernel: w.kernel,
            stride: w.stride,
            field,
            jump,
        });
    }
    let windows: Vec<Window> = layers.iter().map(|(_, w)| *w).collect();
    let total = backward_recursion(&windows);
    debug_assert_eq!(total, field);
    ReceptiveFieldReport { per_layer, total, jump, offset, attention_global: false }
}

/// Field of the spatial path of `spec`. Attention models report the full
/// input extent with `attention_global` set.
pub fn receptive_field(spec: &ArchSpec) -> Result<ReceptiveFieldReport> {
    let model = build(spec, 0)?;
    match (&model.net, spec.family) {
        (Net::Ladder(l), Family::MorphLadder) => {
            let stack: Vec<(String, Window)> =
                l.path.iter().map(|p| (p.name.clone(), p.window)).collect();
            Ok(receptive_field_of_stack(&stack))
        }
        _ => {
            let extent = spec.input_shape[1].max(spec.input_shape[2]);
            Ok(ReceptiveFieldReport {
                per_layer: Vec::new(),
                total: extent,
                jump: 1,
                offset: 0,
                attention_global: true,
            })
        }
    }
}
