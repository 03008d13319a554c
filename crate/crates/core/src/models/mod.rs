//! The black-box CNN, the self-interpretable encoder-decoder network and
//! gradient-based attribution baselines.

mod attribution;
mod graph;
mod spec;

pub use attribution::{integrated_gradients, saliency, LinearModel, ScalarModel};
pub use graph::{Emap, Features, ModelGraph};
pub use spec::{Activation, Architecture, BlackBoxSpec, DecoderSpec, DECODER_DEPTHS, ENCODER_DEPTHS};
