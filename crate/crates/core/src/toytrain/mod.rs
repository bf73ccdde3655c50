//! Desk-scale model and synthetic data that exercise every loss end to end.

pub mod checkpoint;
pub mod evaluate;
pub mod model;
pub mod step;
pub mod synth;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use evaluate::{evaluate_toy, ground_truth_box, predict_sample, ToyPrediction, BinSelection, DetectionJitter, ToyEvaluation};
pub use model::{ForwardPass, Gradients, OptimizerState, ParamMask, ToyModel};
pub use step::{batch_loss, train_step, Example, Labeled, LossConfig, LossSettings};
pub use synth::{generate_dataset, Dataset, Sample, SyntheticGenerator};
pub use trainer::{LogRow, Phase, PhaseBudget, TrainConfig, Trainer, TrainerState, TrainingData, VideoSettings};
