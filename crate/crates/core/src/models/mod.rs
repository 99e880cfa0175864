//! Network architectures as declarative specs, plus checkpoints.

pub mod checkpoint;
pub mod spec;

pub use checkpoint::{Checkpoint, Component, Stage};
pub use spec::{
    conv_encoder_spec, cpc_stack_spec, deepconvlstm_spec, mlp_head_spec, projection_head_spec, CpcStackSpec,
    FeatureShape, LayerSpec, ModelGraphSpec, Padding,
};
