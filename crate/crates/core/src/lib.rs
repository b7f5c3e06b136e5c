//! Slice insertion: predicting where the slices of one volume belong within
//! another, plus the data handling, training and evaluation around it.

pub mod bpr;
pub mod checkpoint;
mod codec;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod labels;
pub mod losses;
pub mod model;
pub mod sampling;
pub mod stats;
pub mod supervision;
pub mod synthetic;
pub mod training;
pub mod volume;

pub use error::{Error, ErrorKind, Result};
