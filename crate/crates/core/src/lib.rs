//! Vision-aided beam selection and user positioning.
//!
//! The crate is organised bottom-up:
//!
//! * [`codebook`]: UPA steering vectors and the rank-1 Type-I precoder set.
//! * [`channel`]: line-of-sight channel synthesis, achievable rate and the
//!   exhaustive-search beam oracle.
//! * [`scenegen`]: synthetic top-down scenes, dataset manifests and splits.
//! * [`model`]: a small block-structured vision transformer with per-task
//!   linear heads and per-group trainability.
//! * [`finetune`]: weighted multi-task loss, stage plans and the progressive
//!   fine-tuning loop.
//! * [`evalmetrics`]: top-k accuracy, rate ratio and positioning error.

pub mod channel;
pub mod codebook;
pub mod error;
pub mod evalmetrics;
pub mod finetune;
pub mod model;
pub mod rng;
pub mod scenegen;

pub use error::{Error, Result};
