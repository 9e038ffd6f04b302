pub mod afss;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod datamodel;
pub mod error;
pub mod heads;
pub mod localization;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ple;
pub mod trainer;

pub use backbone::Level;
pub use error::{Error, Result};
