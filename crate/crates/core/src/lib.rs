pub mod cli;
pub mod error;
pub mod kgraph;
pub mod knowledge;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod synth;
pub mod textkb;
pub mod verify;

pub use error::{Error, Result};
