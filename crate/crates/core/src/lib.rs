pub mod autodiff;
pub mod baselines;
pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod harness;
pub mod nn;
pub mod reprogramming;
pub mod rng;
pub mod source;

pub use error::{Error, Result};
