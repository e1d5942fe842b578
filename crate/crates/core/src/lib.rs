pub mod error;
pub mod gateway;
pub mod ingest;
pub mod text;
pub mod tree;
pub mod graph;
pub mod resolution;
pub mod index;
pub mod operators;
pub mod planner;
pub mod eval;
pub mod stats;
pub mod config;
pub mod cli;

pub use error::{Error, ErrorClass, Result};
