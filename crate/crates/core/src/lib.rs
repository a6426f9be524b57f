pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod cost;
pub mod decoder;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod model;
pub mod retrieval;
pub mod selftest;
pub mod sweep;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
