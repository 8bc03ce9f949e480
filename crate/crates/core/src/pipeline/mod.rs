//! Joint image/label transforms, the two augmentation schemes, enhancement,
//! and the training-set views the trainer draws from.

mod augment;
mod dataset;
mod enhance;
mod transform;

pub use augment::{augment, augment_frames, derived_id, materialize, AugmentScheme};
pub use dataset::{AugmentedSet, InMemorySet, ManifestSet, TrainSet};
pub use enhance::{clahe, enhance, percentile_rescale, EnhanceConfig};
pub use transform::{
    apply_transform, flip_pair, rotate_pair, rotate_point, transform_centers, Flip,
};
