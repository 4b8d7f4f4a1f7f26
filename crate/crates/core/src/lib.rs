//! Variational empowerment estimation and empowerment-maximizing policies.

pub mod autodiff;
pub mod distributions;
pub mod dvbf;
pub mod empowerment;
pub mod envs;
pub mod experiment;
pub mod error;
pub mod networks;
pub mod policy;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
