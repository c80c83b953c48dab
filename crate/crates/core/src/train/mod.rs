//! Losses, the ADAM optimizer, the training loop and the architecture/loss
//! ablation.

pub mod ablation;
pub mod adam;
pub mod loss;
pub mod trainer;

pub use ablation::{ablation, ablation_from_weights, score, AblationReport, AblationRow};
pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use loss::{loss, loss_l1, loss_l2, LossKind};
pub use trainer::{train, LossRecord, TrainConfig, TrainOutputs, TrainResult, TrainingPair, TrainingSetup};
