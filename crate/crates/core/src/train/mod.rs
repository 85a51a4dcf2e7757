//! Optimisation, training loop and the experiment harnesses.

mod checkpoint;
mod config;
mod experiments;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError,
};
pub use config::{ConfigError, DataConfig, TrainConfig};
pub use experiments::{
    noise_comparison_config, run_ablation, run_noise_study, write_csv, AblationRow, NoiseRow,
    RunCache, ABLATION_HEADER, NOISE_HEADER,
};
pub use optim::{clip_global_norm, ClipError, Sgd};
pub use schedule::poly_lr;
pub use trainer::{build_data, evaluate, train, write_log, LogEntry, TrainError, TrainOutcome};
