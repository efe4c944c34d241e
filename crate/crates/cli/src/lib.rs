//! Command-line front end and HTTP service for the `porous_gp` surrogate.

pub mod args;
pub mod server;
pub mod svg;
