//! Losses, reference pretraining and fine-tuning against a frozen reference.

mod config;
mod gradsuite;
mod log;
mod loss;
mod session;

pub use config::{Preset, TrainConfig};
pub use log::{format_log, LogRecord};
pub use loss::{
    batch_loss, hard_loss, reference_loss, stack_mels, total_loss, validate_omega, BatchLoss,
    LossBreakdown,
};
pub use session::{
    finetune, finetune_with, finetune_without_reference, generate_pseudo_labels, pretrain,
    pseudo_label_speaker, shared_params_hash, FinetuneOptions, FinetuneSession, TrainOutcome,
};
pub use gradsuite::{composite_gradient_check, op_gradient_checks, COMPOSITE_EPS, COMPOSITE_FLOOR, COMPOSITE_KINK_TOL, SUITE_EPS};
