//! U-Net segmentation network with hand-written backward passes.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod tensor;

pub use checkpoint::{Checkpoint, StageTag};
pub use model::{param_count, DropoutSemantics, Model, ModelConfig, ParamView, Tape, UNet};
pub use tensor::{FeatureMap, Real};
