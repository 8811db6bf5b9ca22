//! Losses, checkpoints and the training loops.

mod checkpoint;
mod losses;
mod smoke;
mod trainer;

#[cfg(test)]
mod tests;

pub use checkpoint::{optimizer_pairs, set_optimizer, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use losses::{
    adversarial_losses, csdgan_loss, csdnet_loss, mse_loss, perceptual_loss, relativistic_losses, smooth_l1_illum,
    FeatureExtractor, LossTerms, LossWeights, EXTRACTOR_WIDTHS,
};
pub use smoke::{ablation, ablation_csv, smoke_run, AblationRow, SmokeConfig, SmokeOutcome};
pub use trainer::{batch_indices, StepRecord, TrainConfig, TrainReport, Trainer, PERCEPTUAL_SEED};
