pub mod error;
pub mod mapgen;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod optim;
pub mod par;
pub mod report;
pub mod rng;
pub mod textcodec;

pub use error::{Error, Result};
