//! Certified and adversarial training on a small f64 autodiff engine.
//!
//! Modules, bottom-up: [`tensor`] (tape-based reverse mode), [`network`]
//! (layers, presets, checkpoints), [`bounds`] (interval bound propagation and
//! the ForwAbs gap), [`attacks`] (FGSM family and PGD), [`losses`]
//! (adversarial, IBP and the expressive losses), [`train`] (schedules,
//! optimisers, evaluation, catastrophic-overfitting probe, toy sweeps) and
//! [`data`] (IDX, synthetic blobs, splits, run configs).

pub mod attacks;
pub mod bounds;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
mod fsutil;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{ConfigError, Error, IdxError, Result};
pub use fsutil::write_atomic;
pub use attacks::{AdversarialBatch, AttackConfig, AttackKind};
pub use bounds::{BoundOptions, BoundStats, BoundsState, ForwAbsGap};
pub use config::RunConfig;
pub use data::Dataset;
pub use losses::{LossFamily, LossSpec, LossValue};
pub use network::{BnMode, InitScheme, Layer, Mode, Network, Preset};
pub use train::{EpochMetrics, EvalConfig, TrainPlan};
pub use tensor::{Gradients, Tape, Tensor, Var};
