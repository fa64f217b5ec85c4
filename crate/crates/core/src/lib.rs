//! Practice-invariant representation learning at desk scale.
//!
//! The crate trains a small MLP encoder whose embeddings are pushed to be
//! uninformative about the data-generating environment, using two
//! complementary pressures:
//!
//! * an adversarial environment classifier attached through a gradient
//!   reversal layer, and
//! * an invariant-risk penalty measuring how far the per-environment
//!   optimal linear probes on the embedding drift apart.
//!
//! A synthetic structural causal model ([`datagen`]) supplies environments
//! that share the outcome mechanism but differ in how practice features are
//! observed, so the gains from invariance can be measured on a held-out
//! environment ([`metrics`], [`harness`]).

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod harness;
mod linalg;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
