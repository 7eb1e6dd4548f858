//! Controllable token-sequence conversion with masked discrete diffusion.
//!
//! The crate covers the whole token-level pipeline: absorbing-mask
//! corruption and its reweighted loss, a small bidirectional predictor
//! conditioned on encoder content features, common-token labelling and
//! prediction, flow-matching duration ratios, CTC guidance, and the greedy
//! reuse-aware sampler, together with a synthetic paired corpus whose ground
//! truth is known.

pub mod autodiff;
pub mod corpus;
pub mod ctp;
pub mod diffusion;
pub mod duration;
pub mod error;
pub mod experiments;
pub mod guidance;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
