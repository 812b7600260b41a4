//! Balance loss, AdamW, and the deterministic training loop.

pub mod balance;
pub mod check;
pub mod optim;
pub mod trainer;

pub use balance::{balance_loss, balance_stats, total_loss, BalanceStats};
pub use check::{grad_check_model, model_gradient, model_loss};
pub use optim::{AdamConfig, AdamW, StepInfo};
pub use trainer::{moving_average, TrainSettings, Trainer};
