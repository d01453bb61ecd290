pub mod cli;
pub mod config;
pub mod embeddings;
pub mod error;
pub mod gpvar;
pub mod graph;
pub mod io;
pub mod model;
pub mod nn;
pub mod seed;
pub mod series;
pub mod trainer;
pub mod transfer;

pub use error::{Error, Result};
