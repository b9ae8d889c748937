//! Trajectory prediction toolkit for in-flight uneven objects.
//!
//! The crate is organized around a constant-acceleration Kalman filter whose
//! measurement model is a learned recurrent network:
//!
//! - [`statespace`]: the nine-dimensional flight state, the linear transition
//!   model, and the Kalman prediction/measurement steps.
//! - [`flight`]: a drag + Magnus force simulator used as dataset source and
//!   ground-truth oracle, plus dataset file I/O.
//! - [`autodiff`]: a minimal reverse-mode tape over small dense tensors; all
//!   network and filter training gradients flow through it.
//! - [`nae`]: the neural acceleration estimator (encoder, LSTM core, decoder)
//!   with teacher-forcing, free-running, and reconstruction losses.
//! - [`naedf`]: the estimator embedded in a differentiable Kalman filter,
//!   trained end-to-end by maximizing the posterior likelihood.
//! - [`metrics`]: accumulated error curves, the leading-time criterion, and
//!   cross-object generalization matrices over any predictor.
//! - [`catch_sim`]: closed-loop interception with a velocity-controlled
//!   kinematic effector and success-rate scoring.

// Validation uses `!(x > 0.0)` so NaN fails the check too; `x <= 0.0` would
// let NaN through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod catch_sim;
pub mod error;
pub mod flight;
pub mod metrics;
pub mod nae;
pub mod naedf;
pub mod statespace;
pub mod trajectory;

pub use error::{Error, Result};
pub use statespace::State9;
pub use trajectory::{StateSample, Trajectory};
