//! Differentiable architecture search over a bilateral-branch network for
//! long-tailed image classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`param`]: a small `f64` tensor engine with
//!   reverse-mode differentiation and momentum SGD.
//! * [`nas`]: mixed operations, cells, architecture parameters, and genotypes.
//! * [`bbn`]: the shared-backbone, two-head model, its loss, and the
//!   gradient-decomposition probe.
//! * [`schedule`]: mixing-ratio, learning-rate-scaling, and cosine schedules.
//! * [`data`]: CIFAR-10 binary ingestion, a synthetic generator, long-tail
//!   construction, samplers, and augmentation.
//! * [`train`]: configuration, the bilevel training loop, evaluation, run
//!   history, and checkpoints.

pub mod autodiff;
pub mod bbn;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nas;
pub mod param;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use autodiff::{ConvCfg, Graph, PoolCfg, PoolKind, Var};
pub use error::{Error, Result};
pub use param::{sgd_step, ParamId, ParamStore, Parameter, Role, SgdConfig, SgdReport};
pub use tensor::Tensor;
