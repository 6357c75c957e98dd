pub mod data;
pub mod distiller;
pub mod ensemble;
pub mod error;
pub mod local_trainer;
pub mod metrics;
pub mod model_zoo;
pub mod orchestrator;
pub mod rng;
pub mod synthesis;

pub use error::{Error, Result};
