//! The three-stream Causal Transformer.
//!
//! Treatments, covariates and outcomes are embedded separately, mixed by
//! stacked multi-input blocks (self-attention, cross-attention, pooling with
//! the static representation, feed-forward), then averaged into the
//! representation `Φ`. Two small heads sit on top: the outcome predictor `G_Y`
//! and the treatment classifier `G_A`.

mod checkpoint;
mod config;
mod data;
mod forward;
mod params;
mod rollout;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{isolate_subnetwork, CrossFlags, CtConfig, PeMode, Stream};
pub use data::{PatientTrajectory, SeqBatch, Standardizer};
pub use forward::{
    balanced_repr, block_forward, classify_treatment, embed, encode, outcome_head, position_tables,
    predict_factual, predict_outcome, representations, treatment_head, Dropout, StreamMasks,
    Streams,
};
pub use params::{Bound, CtParams, Group, ParamSet};
pub use rollout::{rollout, rollout_many, RolloutQuery};
