pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod mixer;
pub mod nn;
pub mod policy;
pub mod rollout;
pub mod solver;
pub mod trainer;

pub use error::{Error, Result};
