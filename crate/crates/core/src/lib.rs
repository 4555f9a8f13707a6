pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod doublewell;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod metrics;
pub mod params;
pub mod pnm;
pub mod potts;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
