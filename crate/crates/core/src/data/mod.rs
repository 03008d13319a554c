//! The synthetic tumor-detection task and image-directory ingestion.

mod config;
mod dataset;
mod imageio;
mod synth;

pub use config::{BackgroundParams, DatasetConfig, TumorParams, Variant};
pub use dataset::{Dataset, Split, SplitKind};
pub use imageio::{export_split_pgm, load_image_dir, read_gray_image, read_pgm, write_pgm16, write_pgm8};
pub use synth::{
    gen_background, gen_dataset, gen_image, grid_position, insert_tumor, insert_tumors, tumor_mask, GeneratedImage,
};
