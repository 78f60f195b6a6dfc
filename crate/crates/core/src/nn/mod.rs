//! Small convolutional classifiers with spatial attention.

pub mod analysis;
pub mod attention;
pub mod model;

pub use analysis::{
    bilinear_upsample, ensemble_predict, extract_attention, extract_attention_batch, logit_gradient, saliency,
    AttentionMap,
};
pub use attention::{spatial_attention_forward, SpatialAttentionModule};
pub use model::{build_model, images_to_tensor, Forward, Layer, Model, ModelSpec, Param, Variant};
