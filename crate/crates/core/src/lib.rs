//! Gaussian-process based safety-critical control with CLF/CBF second-order
//! cone programs and exact pointwise feasibility analysis.

pub mod config;
pub mod conic;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod feasibility;
pub mod gp;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod simulation;

pub use error::{Error, Result};
