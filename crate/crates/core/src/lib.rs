//! Sharded data-parallel training simulator and analytical cost model.

pub mod cli;
pub mod costmodel;
pub mod error;
pub mod gate;
pub mod schedule;
pub mod simengine;
pub mod strategy;
pub mod topology;
pub mod verify;
pub mod workload;

pub use error::{Error, Result};
