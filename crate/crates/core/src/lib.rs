//! End-to-end stress detection from single-lead ECG.
//!
//! The crate covers the full pipeline: signal conditioning ([`dsp`]), dataset
//! ingestion and a canonical record format ([`ingest`]), a convolutional
//! front-end plus transformer-encoder classifier ([`model`]) built on a
//! from-scratch reverse-mode autodiff engine ([`autograd`]), and training
//! with leave-one-subject-out evaluation and per-subject fine-tuning
//! calibration ([`training`]). Everything is deterministic given a seed.

pub mod autograd;
pub mod dsp;
pub mod error;
pub mod ingest;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use rng::Rng;
