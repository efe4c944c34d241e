//! Error-aware Gaussian-process surrogates for the critical pressure of
//! steady Darcy flow with a random log-permeability field.
//!
//! The workflow: sample extraction rates and KL coefficients on a rank-1
//! lattice, solve the finite-volume problem for each sample, calibrate the
//! discretization error across a level schedule, fit a circulant-structured
//! GP in `O(n log n)`, and estimate the confidence that the critical pressure
//! stays below a threshold by quasi-Monte Carlo.

pub mod calibration;
mod codec;
pub mod confidence;
pub mod darcy;
pub mod error;
pub mod fastgp;
pub mod linalg;
pub mod mesh;
pub mod normal;
pub mod pipeline;
pub mod qmc;
pub mod random_field;

pub use error::{Error, Result};
pub use mesh::Mesh;
