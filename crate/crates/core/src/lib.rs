//! Cross-domain few-shot learning guided by a handful of labeled target
//! images: episodic meta-training that mixes source and auxiliary target
//! queries, disentangles features into domain-irrelevant and domain-specific
//! parts, and trains them with a joint few-shot and domain objective.
//!
//! Everything runs on a small `f64` autodiff engine ([`tensor`]) over a
//! procedurally generated two-domain image benchmark ([`data`]).

pub mod data;
pub mod error;
pub mod losses;
pub mod mixup;
pub mod model;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
