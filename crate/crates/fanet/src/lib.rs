//! FA-Net: a small image classifier built around a fuzzy channel selective
//! spatial attention module, implemented on a from-scratch f64 autodiff
//! engine. Everything is single threaded and deterministic for a fixed
//! seed.

pub mod attention;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod vis;

pub use error::{Error, Result};
pub use tensor::{finite_difference_check, Tape, Tensor};

/// Binary entry point; returns the process exit code.
pub fn run() -> i32 {
    cli::run()
}
