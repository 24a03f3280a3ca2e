pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod edge;
pub mod edge_mae;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod mt_net;
pub mod nn;
pub mod ntf;
pub mod optim;
pub mod patch;
pub mod phantom;
pub mod real;
pub mod rng;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
