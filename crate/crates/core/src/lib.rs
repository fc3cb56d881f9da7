pub mod adapters;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod host;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod runner;
pub mod train;

pub use error::{Error, Result};
