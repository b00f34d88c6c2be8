pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ebt;
pub mod error;
pub mod mcmc;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod train;

pub use config::{Family, Mode, ModelConfig};
pub use error::{Error, Result};
