pub mod autodiff;
pub mod data;
pub mod diversity;
pub mod error;
pub mod gating;
pub mod harness;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;

pub use error::{Error, Result};
