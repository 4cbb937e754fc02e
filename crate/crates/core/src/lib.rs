//! Laboratory for PI-based field-oriented control of a PMSM augmented with a
//! tiny residual neural corrector.
//!
//! The crate covers the whole chain: plant simulation ([`plant`]), the FOC
//! cascade ([`control`]), stress-test reference profiles ([`profile`]),
//! training-target manufacture ([`ground_truth`]), the corrector network and
//! its training ([`nn`]), model optimization passes ([`opt`]), deployment cost
//! estimates ([`cost`]), loop metrics ([`metrics`]), trace plots ([`plot`])
//! and the experiment pipeline ([`experiment`]).

pub mod control;
pub mod cost;
pub mod error;
pub mod experiment;
pub mod ground_truth;
pub mod metrics;
pub mod nn;
pub mod opt;
pub mod plant;
pub mod plot;
pub mod profile;

pub use error::{Error, Result};
