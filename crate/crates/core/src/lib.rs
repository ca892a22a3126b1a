//! Localized system-level covariance steering for networked linear
//! time-varying systems: problem data, a conic solver, centralized and
//! consensus-ADMM solution methods, and closed-loop evaluation.

pub mod assemble;
pub mod central;
pub mod config;
pub mod conic;
pub mod consensus;
pub mod error;
pub mod experiment;
pub mod fixtures;
pub mod io;
pub mod linalg;
pub mod problem;
pub mod rng;
pub mod sim;
pub mod sls;
pub mod system;
pub mod topology;
pub mod verify;

pub use error::{Error, Result};
