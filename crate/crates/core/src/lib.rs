//! Representation learning with feedback at desk scale.
//!
//! - [`feedback`]: detector targets, error recovery and compensation.
//! - [`stats`]: moments of an error and its proportional inverse.
//! - [`control`]: rational transfer functions and the closed-loop analogy.
//! - [`synth`]: synthetic streak residual datasets.
//! - [`mlp`] and [`learner`]: a small network and two-phase training.
//! - [`harness`]: reproducible experiments behind the command line tool.

pub mod control;
pub mod error;
pub mod feedback;
pub mod harness;
pub mod learner;
pub mod mlp;
pub mod rng;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
