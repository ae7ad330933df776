//! Encoder-decoder sound event detection on top of a patch-token audio
//! transformer, trained with mean-teacher semi-supervision and evaluated
//! with event-based F1 and PSDS.

pub mod cli;
pub mod config;
pub mod datagen;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod events;
pub mod features;
pub mod gradsuite;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
