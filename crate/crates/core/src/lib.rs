//! Patch-based attention image classification.
//!
//! The pipeline runs image resampling ([`resample`]), CutMix augmentation
//! ([`augment`]), vanilla or shifted patch tokenization ([`tokenizer`]), a
//! pre-LN transformer encoder with a configurable attention temperature
//! ([`model`]), AdamW training with warmup ([`training`]) and one-vs-rest ROC
//! evaluation ([`metrics`]). Everything numeric sits on the small reverse-mode
//! differentiator in [`tensor`].

pub mod augment;
pub mod config;
pub mod data_io;
pub mod error;
pub mod experiments;
pub mod image;
pub mod metrics;
pub mod model;
pub mod resample;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
