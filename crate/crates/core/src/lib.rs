//! Learning reduced polynomial models of PDE dynamics from snapshot data.
//!
//! The usual flow is: generate or load snapshots ([`data`], [`fom`]),
//! optionally lift them to quadratic variables ([`lifting`]), compute a POD
//! basis and project ([`pod`]), infer reduced operators ([`opinf`]) with
//! regularization chosen by grid search ([`tuning`]), integrate the learned
//! model ([`rom`]) and compare with reference data ([`metrics`]). The
//! [`pipeline`] module runs the whole chain from one configuration.

// `!(x > y)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod bytes;
pub mod data;
pub mod error;
pub mod fom;
pub mod lifting;
pub mod metrics;
pub mod opinf;
pub mod pipeline;
pub mod pod;
pub mod rom;
pub mod synthetic;
pub mod tuning;

pub use error::{Error, Result};
