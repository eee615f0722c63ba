//! Federated estimation of individual and average treatment effects.
//!
//! Sources hold their own records and never share them. A server coordinates
//! gradient-ascent rounds over a shared evidence lower bound; each source
//! reports only its gradient contribution and ELBO value. Counterfactual
//! outcomes are imputed from a Gaussian-process outcome model whose
//! cross-source coupling runs entirely through summary statistics.

// Negated float comparisons are deliberate throughout: `!(x > 0.0)` rejects
// NaN where the suggested `x <= 0.0` would let it through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod dedup;
pub mod error;
pub mod eval;
pub mod fedrun;
pub mod mathcore;
pub mod model;
pub mod pipeline;
pub mod predictor;
pub mod variational;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;
