//! Self-interpretable binary classifiers built from equivalency maps.
//!
//! A trained black-box CNN computes a test statistic `t` from an image. An
//! encoder-decoder network with the black-box's frozen feature extractor is
//! distilled so that the raster sum of its decoder output, the equivalency
//! map, reproduces `t`. The crate contains the tensor/autodiff engine, the
//! synthetic tumor-detection task, the models, training protocols and the
//! evaluation suite.

pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod models;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
