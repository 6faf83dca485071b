//! Rotation-invariant masked point modeling.

#![allow(clippy::needless_range_loop)]

pub mod ablation;
pub mod canonical;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod invariance;
pub mod io;
pub mod mae;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pointcloud;
pub mod rotation;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
