//! Response selection with a self-attention comparison module.

pub mod error;
pub mod experiments;
pub mod data;
pub mod encoders;
pub mod metrics;
pub mod numerics;
pub mod persist;
pub mod ranking;
pub mod scm;

pub use error::{Error, Result};
