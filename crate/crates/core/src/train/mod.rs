//! AdamW training with exponential learning-rate decay, flip augmentation
//! and per-epoch evaluation.

mod optim;
mod run;

pub use optim::{adamw_step, decays, lr_at_epoch, OptimizerState, TrainConfig};
pub use run::{
    compute_gradients, evaluate, log_csv, predict_windows, train_epoch, train_run, EpochLog, EvalOptions, RunSummary,
    StepLoss, TrainOutcome, LOG_HEADER,
};
