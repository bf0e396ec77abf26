//! Persistence: dataset files, normalization statistics and run configs.

pub mod config;
pub mod dataset;
pub mod norm;

pub use config::{AblationFlags, CopilotConfig, DemoConfig, EnvConfig, EvalConfig, RunConfig};
pub use dataset::{read_dataset, read_dataset_from, write_dataset, write_dataset_to, SCHEMA_VERSION};
pub use norm::{compute_norm_stats, Moments, NormStats, STD_FLOOR};
