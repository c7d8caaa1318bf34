//! Causal Transformer for estimating counterfactual outcomes over time.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`diffcore`]),
//! relative-position attention ([`attention`]), the three-stream model
//! ([`model`]), adversarial training with counterfactual domain confusion
//! ([`train`]), a tumor-growth simulator ([`tumorsim`]), a marginal
//! structural model baseline ([`msm`]) and an experiment harness
//! ([`harness`]).

pub mod attention;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod model;
pub mod msm;
pub mod train;
pub mod tumorsim;

pub use error::{Error, Result};
