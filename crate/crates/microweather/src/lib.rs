//! Micro-weather inference engine.
//!
//! Infers near-surface weather (2 m temperature, 2 m dewpoint, 10 m wind u/v)
//! at arbitrary points and on high-resolution tiles by conditioning a coarse
//! gridded weather state on sparse station observations and static surface
//! features, via masked self-attention over a backbone station network and
//! cross-attention from target locations to that context.
//!
//! The crate also ships the two classical baselines (station interpolation
//! with a linear-kernel RBF, bilinear reanalysis interpolation), a metric
//! suite with spatially de-meaned R², an ablation/report harness, and a
//! seeded synthetic world generator used for desk-scale verification.

pub mod attention;
pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod dataio;
pub mod encoders;
pub mod error;
pub mod geometry;
pub mod harmonics;
pub mod inference;
pub mod metrics;
pub mod reference;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;
pub mod training;
pub mod types;

pub use error::{Error, Result};
