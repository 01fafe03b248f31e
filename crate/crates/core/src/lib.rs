//! Online source-free universal domain adaptation with a contrastive mean
//! teacher, on a small trainable backbone and synthetic shifted streams.

pub mod checkpoint;
pub mod engine;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod prototypes;
pub mod pseudo;
pub mod report;
pub mod scenario;
pub mod selftest;
pub mod stream;

pub use error::{Error, Result};
