//! Storage, reporting and the command-line workflow around `diffup-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod registry;
pub mod report;
pub mod selftest;

pub use error::{Error, Result};
