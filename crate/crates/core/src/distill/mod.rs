//! Stage two: distillation of quantizer bounds from the FP model.

pub mod adam;
pub mod augment;
pub mod loss;
pub mod train;

pub use adam::{cosine_lr, Adam};
pub use augment::Augment;
pub use loss::{feature_loss, output_loss, record_loss, total_loss, LossVars};
pub use train::{batch_gradient, dqc_train, validation_psnr, DistillConfig, DistillOutcome, LogEntry};
