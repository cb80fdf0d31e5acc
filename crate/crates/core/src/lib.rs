//! Dual-task plume segmentation and flux classification from thermal video.
//!
//! The crate bundles a small reverse-mode tensor engine ([`numerics`]), the
//! gas-conditioned encoder, decode head and temporal fusion ([`model`]), the
//! staged training schedule ([`curriculum`]), a synthetic plume generator
//! with a threshold baseline ([`synth`]), evaluation metrics ([`metrics`]),
//! and configuration / checkpoint / command plumbing ([`cli`]).

pub mod cli;
pub mod curriculum;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synth;

pub use error::{Error, Result};
