//! Power-compressed spectral loss, warm-up learning-rate schedule, Adam,
//! and the desk-scale training loop.

pub mod adam;
pub mod loss;
pub mod schedule;
pub mod trainer;

pub use adam::{AdamConfig, AdamState};
pub use loss::{power_compress, spectral_loss, LossConfig, LossParts};
pub use schedule::LrSchedule;
pub use trainer::{train_toy, write_loss_csv, StepTrace, TrainConfig};
