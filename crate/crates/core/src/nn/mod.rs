//! The segmentation network, its losses and optimiser.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod tensor;
pub mod unet;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointSidecar};
pub use loss::{
    combined_loss, combined_loss_with_grad, compute_class_weights, dice_loss, dice_loss_with_grad,
    weighted_cross_entropy, weighted_cross_entropy_with_grad, ClassWeights, LossKind, ProbabilityField,
};
pub use unet::{build_unet, UNetConfig, UNetModel};
