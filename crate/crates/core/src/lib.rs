//! Expansive supervision: train coordinate networks and radiance fields on a
//! small, content-selected subset of pixels each iteration.

pub mod adam;
pub mod checkpoint;
pub mod cli;
pub mod edge;
pub mod error;
pub mod image;
pub mod inr;
pub mod metrics;
pub mod nerf;
pub mod report;
pub mod selection;
pub mod supervision;

pub use error::{Error, Result};
