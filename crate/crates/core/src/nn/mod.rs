//! Layers, parameter registry, initialization, Adam, and checkpoints.

mod adam;
mod checkpoint;
mod layers;
mod params;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use layers::{Activation, Linear, LstmCell, Mlp};
pub use params::{init_params, BoundParams, Init, ParamId, ParamRegistry, ParamSpec, ParamSpecs};
