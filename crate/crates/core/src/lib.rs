//! Distributed conditional GAN training with one central generator and
//! per-shard discriminators that never share their data.
//!
//! Modules, bottom-up: [`autodiff`] (tape-based reverse mode), [`nn`] (MLPs
//! and optimizers), [`mixture`] (the synthetic conditional target), [`gan`]
//! (losses and both sides of the training step), [`protocol`] (wire format,
//! transports, node/generator runtimes, accounting and auditing), [`oracle`]
//! (closed-form optimality checks), [`metrics`] (segmentation scores) and
//! [`experiment`] (run configuration, artifacts and reports).

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod experiment;
pub mod gan;
pub mod metrics;
pub mod mixture;
pub mod nn;
pub mod oracle;
pub mod protocol;

pub use error::{Error, Result};
