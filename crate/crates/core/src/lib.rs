//! Mixed-effects inference for collections of epidemics observed in aggregated form.

pub mod baseline;
pub mod compartments;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod filters;
pub mod gillespie;
pub mod linalg;
pub mod model;
pub mod popmodel;
pub mod rng;
pub mod saem;

pub use error::{Error, Result};
