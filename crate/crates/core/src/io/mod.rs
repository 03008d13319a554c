//! Checkpoints, run configuration and on-disk artifacts.

mod checkpoint;
mod config;
mod export;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, file_hash, load_checkpoint, save_checkpoint, CheckpointMeta, ManifestEntry,
};
pub use config::{EvalConfig, ExperimentConfig, RunConfig, SECTIONS};
pub use export::{export_emap, load_dataset, read_meta, save_dataset};
