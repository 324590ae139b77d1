//! Batch Bayesian optimization by parallel predictive entropy search.
//!
//! A batch of `Q` query points is chosen jointly by maximizing an
//! expectation-propagation approximation of the mutual information between the
//! batch's noisy outputs and the location of the objective's global maximizer.
//! The crate also ships the greedy batch baselines it is usually compared with,
//! benchmark objectives, a rejection-sampling ground truth for the acquisition
//! surface and an experiment harness.

pub mod ep;
pub mod acquisition;
pub mod baselines;
pub mod error;
pub mod gp;
pub mod harness;
pub mod linalg;
pub mod objectives;
pub mod optimize;
pub mod oracle;
pub mod special;
pub mod xstar;

pub use error::{Error, Result};
