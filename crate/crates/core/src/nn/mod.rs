//! Dense networks with reverse-mode gradients and Adam.

pub mod adam;
pub mod gradcheck;
pub mod mlp;
pub mod params;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use mlp::{Activation, LayerSpec, MlpOutput, MlpSpec, Mode};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tape::{BatchStats, Tape, Var};
