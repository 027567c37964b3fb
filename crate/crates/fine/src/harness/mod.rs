//! Training loop, evaluation, configuration, checkpointing, ablations,
//! the MI benchmark, and everything else the CLI drives.

pub mod checkpoint;
pub mod gradsuite;
pub mod config;
pub mod mi_bench;
pub mod model;
pub mod opt;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use mi_bench::{mi_bench, run_cell, true_gaussian_mi, MiBenchCell};
pub use model::{FineModel, ModelDims};
pub use opt::{warmup_scale, AdamW};
pub use train::{evaluate, train, TrainState, TrainSummary};
