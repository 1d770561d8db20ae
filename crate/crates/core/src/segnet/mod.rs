//! Desk-scale segmentation network: latent stem, toy UNet, pixel head,
//! losses, AdamW, training and single/multi-scale inference.

mod adamw;
mod augment;
mod config;
mod loss;
mod model;
mod predict;
mod train;

pub use adamw::AdamW;
pub use augment::{augment, AugmentConfig, Augmented};
pub use config::{FusionMode, PdSource, SegNetConfig, TrainConfig};
pub use loss::{seg_loss, Loss, LossWeights, DICE_SMOOTHING};
pub use model::SegNet;
pub use predict::{
    argmax_labels, evaluate, logits, predict, predict_probs, scaled_extent, PredictOptions,
    INFERENCE_NOISE_SEED,
};
pub use train::{load_checkpoint, save_checkpoint, train, trace_csv, TraceRow, TrainRun};
