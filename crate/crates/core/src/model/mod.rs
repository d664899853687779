//! Device architectures, trainable models and local training.

pub mod arch;
pub mod checkpoint;
mod layers;
mod network;
pub mod train;

pub use arch::{ArchitectureSpec, LayerKind, LayerSpec};
pub use network::{DeviceModel, Features, Grads, Owner, Param, Trace};
pub use train::{evaluate, local_train, predict, TrainReport, TrainingHyperparams};
