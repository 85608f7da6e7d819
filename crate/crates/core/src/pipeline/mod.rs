//! Rotation geometry, stroke-level precomputation and mask blending.

pub mod levels;
pub mod mask;
pub mod rotation;

pub use levels::{
    blend_feature_space, blend_image_space, default_levels, estimate_memory, precompute_levels,
    precompute_levels_with_budget, render_local_edit, rotate_mask, BlendMode, FeatureKey, LocalEdit, PreviewSet,
    StrokeFeatureSet, DEFAULT_MEMORY_BUDGET,
};
pub use mask::LevelMask;
pub use rotation::{crop_unrotate, rotate_pad, RotationFrame};
