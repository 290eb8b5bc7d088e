pub mod arrow;
pub mod autodiff;
pub mod cbp;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod verify;

pub use error::{Error, Result};
