//! Architectures under study: the ResNet-to-ConvNeXt ladder and a tiny ViT.

mod ladder;
mod layers;
mod model;
mod receptive;
mod spec;
mod vit;

pub use ladder::PathLayer;
pub use model::{
    build, count_by_tag, param_layout, ForwardOutput, Mode, ModuleTag, ParamInfo, Selection, TaggedModel,
};
pub use receptive::{
    backward_recursion, receptive_field, receptive_field_of_stack, LayerField, ReceptiveFieldReport,
};
pub use spec::{
    documented_changes, spec_for_step, tiny_vit, Activation, ArchSpec, BlockStyle, Family,
    NormCount, NormKind, StemSpec, VitSpec, LAYER_SCALE_INIT, STOCHASTIC_DEPTH_RATE,
};
