//! Parameters, initialisation, the Adam optimiser and early stopping.

mod adam;
mod early_stop;
mod init;
mod params;

pub use adam::{adam_step, AdamConfig};
pub use early_stop::{early_stop, EarlyStopper, StopDecision};
pub use init::{init_params, InitKind, InitScheme, ParamSpec};
pub use params::{Binding, Parameter, ParameterStore};
