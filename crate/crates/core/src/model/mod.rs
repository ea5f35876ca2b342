//! Diffusion transformer, its joint RGBA extensions, checkpoints and training.

pub mod checkpoint;
mod config;
mod dit;
mod optim;
mod train;

pub use config::{DiTConfig, NUM_CONDITIONS};
pub use dit::{DiT, Extension, ForwardOutput, JointDesign, EXTENSION_PREFIX};
pub use optim::{OptimConfig, Rmsprop};
pub use train::{finetune_rgba, pretrain_base, TrainConfig, TrainReport};
