pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod nn;

pub use error::{Result, SluError};
pub mod rng;
pub mod train;
