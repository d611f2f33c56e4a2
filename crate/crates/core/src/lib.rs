//! Phrase-aware 3D visual grounding at desk scale.
//!
//! The crate covers the whole pipeline: a small differentiable tensor core
//! ([`nn`]), a deterministic generator of synthetic referential scenes
//! ([`scenegen`]), the sample data model with alignment targets
//! ([`dataset`]), the cross-modal transformer whose last cross-attention map
//! is read as a phrase-object alignment map ([`model`]), two-stage training
//! ([`training`]) and the grounding metrics ([`eval`]).

pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod prepared;
pub mod training;
pub mod scenegen;

pub use error::{Error, Result};
