//! Tokenizer, configuration files, metrics logs, checkpoints and corpora.

pub mod checkpoint;
pub mod config_file;
pub mod corpus;
pub mod metrics;
pub mod summary;
pub mod tokenizer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config_file::ExperimentConfig;
pub use metrics::{MetricsRecord, MetricsWriter};
