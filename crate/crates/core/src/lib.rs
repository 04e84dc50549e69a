pub mod bootstrap;
pub mod corpus;
pub mod crf;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tagging;
pub mod uncertainty;

pub use error::{Error, Result};
