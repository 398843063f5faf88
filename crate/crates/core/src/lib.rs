pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod ntpl;
pub mod octconv;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
