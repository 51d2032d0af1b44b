//! Parameter initialization, optimization and evaluation.

pub mod adam;
pub mod config;
pub mod evaluate;
pub mod init;
pub mod trainer;

pub use adam::AdamState;
pub use config::{lr_schedule, TrainConfig};
pub use evaluate::{default_metrics, evaluate, MetricsReport, Predictor};
pub use crate::synth::metrics::Metric;
pub use init::{xavier_init, xavier_uniform};
pub use trainer::{fit, train_base, train_plugins, EpochRecord, Trainable, TrainHistory};
