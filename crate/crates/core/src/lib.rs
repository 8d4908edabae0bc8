//! Sequential recommendation with uniformity/frequency-aware enhancement.
//!
//! Pipeline: raw logs → [`data`] splits → [`partition`] labels → [`trainer`]
//! (encoder in [`model`], auxiliary tasks in [`sequence_enhancer`] and
//! [`item_enhancer`]) → [`eval`] reports. [`cli`] wires it into commands.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod item_enhancer;
pub mod model;
pub mod partition;
pub mod schedule;
pub mod seed;
pub mod sequence_enhancer;
pub mod synth;
pub mod time;
pub mod trainer;

pub use error::{Error, Result};
