//! Meta-reinforced image augmentation for one-shot fine-grained
//! classification: single-image generator adaptation (batch-norm-only
//! fine-tuning), a learned block-grid fusion of real and generated
//! images, a prototypical episodic classifier trained jointly with the
//! fusion network, and the accompanying diversity-analysis suite.

pub mod analysis;
pub mod baselines;
pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod generator;
pub mod ledger;
pub mod nn;
pub mod plot;
pub mod protonet;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
