//! Identification of nonlinear linear-fractional-representation (NL-LFR)
//! models: an LTI state-space block in feedback with a one-hidden-layer
//! neural network, initialized from a best linear approximation and refined
//! by Levenberg-Marquardt on the simulation error.

pub mod boucwen;
pub mod error;
pub mod exec;
pub mod init;
pub mod lm;
pub mod lti;
pub mod metrics;
pub mod nllfr;
pub mod pipeline;
pub mod signals;
pub mod util;

pub use error::{Error, Result};
pub use exec::Execution;
