pub mod config;
pub mod error;
pub mod eval;
pub mod flow;
pub mod forecast;
pub mod geo;
pub mod matrix_io;
pub mod par;
pub mod pattern;
pub mod pipeline;
pub mod recon;
pub mod synth;

pub use error::{Error, Result};
