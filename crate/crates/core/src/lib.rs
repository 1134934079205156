//! Simulation and analysis toolkit for a compartmental opioid-epidemic model
//! driven by degenerate (hypoelliptic) noise.

pub mod cli;
pub mod control;
pub mod density;
pub mod error;
pub mod exit;
pub mod flow;
pub mod io;
pub mod linalg;
pub mod model;
pub mod scaling;
pub mod sde;
pub mod stats;
pub mod streams;

pub use error::{Error, Result};
