pub mod costate;
pub mod ddpg;
pub mod harness;
pub mod envgen;
pub mod error;
pub mod nn;
pub mod replay;
pub mod rng;

pub use error::{Error, Result};
