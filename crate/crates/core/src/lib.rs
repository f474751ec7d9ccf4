pub mod autodiff;
pub mod contrastive;
pub mod data;
pub mod metrics;
pub mod model;
pub mod error;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
