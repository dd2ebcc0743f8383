//! Critical-neuron discovery with false-discovery-rate control over recorded
//! activation traces, unsupervised mechanism learning on the discovered
//! neurons, and ground-truth synthetic testbeds to evaluate both.

pub mod error;
pub mod io;
pub mod knockoffs;
pub mod linalg;
pub mod rng;
pub mod selection;
pub mod trace;
pub mod mechanism;
pub mod evaluation;
pub mod synthetic;
pub mod oracle;
pub mod cli;

pub use error::{Error, Result};
