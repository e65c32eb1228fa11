pub mod conditioning;
pub mod error;
pub mod evalsuite;
pub mod experiment;
pub mod inference;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod synthworld;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
