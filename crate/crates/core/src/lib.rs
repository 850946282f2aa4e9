pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod protocols;
pub mod seed;
pub mod simnet;

pub use error::{Error, Result};
