pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod params;
pub mod training;
pub mod voxel;

pub use error::{Error, Result};
