pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod envs;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod gae;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod policy;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
