//! Files, reports and the command-line driver around `lieq-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
mod container;
pub mod corpus;
pub mod error;
pub mod qformat;
pub mod report;

pub use error::{Error, Result};
