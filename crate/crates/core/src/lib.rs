//! Desk-scale laboratory for privacy attacks against image classifiers.

pub mod aia;
pub mod arch;
pub mod error;
pub mod defense;
pub mod eval;
pub mod exec;
pub mod gia;
pub mod harness;
pub mod mia;
pub mod mlp;
pub mod optim;
pub mod train;
mod util;

pub use error::{Error, Result};
