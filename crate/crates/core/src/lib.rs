pub mod autodiff;
pub mod bench;
pub mod certify;
pub mod corpus;
pub mod embed;
pub mod model;
pub mod perturb;
pub mod error;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
