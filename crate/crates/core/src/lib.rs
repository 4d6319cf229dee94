//! Continual domain-adaptive pre-training of a small transformer LM.
//!
//! The crate is organized bottom-up:
//! - [`autodiff`]: reverse-mode tape over dense f64 tensors, with
//!   gradient-scale hooks.
//! - [`rng`]: deterministic seeding and counter-based dropout masks.
//! - [`model`]: a gated transformer encoder with an MLM head.
//! - [`importance`]: gate-gradient unit importance, normalization, and
//!   the accumulating max-store.
//! - [`trainer`]: optimizers, the soft-masked training step, the
//!   contrastive distillation term, and linear-probe fine-tuning.
//! - [`harness`]: synthetic domain corpora, the continual training
//!   sequence, metrics, and report output.
//! - [`config`]: serializable run configuration and method definitions.

pub mod autodiff;
pub mod config;
pub mod harness;
pub mod importance;
pub mod model;
pub mod rng;
pub mod trainer;
