//! Core library for `dino-forge`: CPU-only self-distillation pretraining of small
//! vision transformers and multi-label defect classification on top of them.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] - a reverse-mode autodiff engine over dense 2-D matrices,
//!   generic over `f32` (training) and `f64` (gradient checking).
//! * [`schedules`] - learning-rate, temperature and EMA-momentum schedules.
//! * [`metrics`] - multi-label classification metrics and effective-rank
//!   estimation of embedding matrices.
//! * [`objectives`] - the self-distillation loss, class-weighted BCE and the
//!   hybrid combination of the two.
//! * [`augment`] - deterministic image augmentation pipelines.
//! * [`data`] - dataset index handling, CSV schemas and the synthetic
//!   defect-image generator.
//! * [`model`] - the vision-transformer backbone plus projection and
//!   classifier heads, parameter storage and checkpointing.
//! * [`engine`] - training loops for the five run modes and structured
//!   run logging.
//! * [`suite`] - the bundled gradient-check suite used by the CLI and tests.

pub mod augment;
pub mod data;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod schedules;
pub mod suite;
pub mod tensor;

pub use error::CoreError;
pub use tensor::{Element, Tensor};
