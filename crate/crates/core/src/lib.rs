pub mod error;
pub mod numcore;

pub use error::{Error, Result};
pub mod graph;
pub mod encode;
pub mod disentangle;
pub mod prompt;
pub mod data;
pub mod tasks;
pub mod eval;
pub mod cli;
