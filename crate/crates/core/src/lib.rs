pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod layout;
pub mod metriplectic;
pub mod model;
pub mod nn;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
