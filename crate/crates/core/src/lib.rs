//! Input-padding reprogramming for cross-domain speaker verification.

pub mod autograd;
pub mod error;
pub mod features;
pub mod models;
pub mod data;
pub mod reprogram;
pub mod train;

pub use error::{Error, Result};
