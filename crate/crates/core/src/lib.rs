//! Architecture search over classification heads on top of a small
//! pretrained transformer encoder.

pub mod bohb;
pub mod encoder;
pub mod error;
pub mod head;
pub mod hyperband;
pub mod nn;
pub mod report;
pub mod run;
pub mod searchspace;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
