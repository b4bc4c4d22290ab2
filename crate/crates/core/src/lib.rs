//! Targeted range attacks on image regression networks.
//!
//! Given a victim `f` mapping an image to a scalar and a target interval
//! `[L, U]`, [`attack::attack`] searches for a small integer perturbation that
//! forces `f(X + delta)` into the interval while keeping every pixel on the
//! `{0..255}` lattice. A small convolutional victim, its Adam trainer and a
//! synthetic labeled dataset make the whole pipeline runnable on a laptop.

pub mod attack;
pub mod campaign;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod image;
pub mod init;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use attack::{attack, AttackConfig, AttackResult, Perturbation, StepSchedule, TargetRange};
pub use dataset::{LabeledDataset, Sample};
pub use error::{Error, Result};
pub use image::ImageU8;
pub use metrics::{AttackRecord, Norms, Summary};
pub use model::{PreprocessSpec, VictimNetwork};
pub use tensor::{Layer, Tensor};
pub use train::TrainConfig;
