pub mod analyzer;
pub mod blocks;
pub mod cli;
pub mod error;
pub mod graph;
pub mod kv;
pub mod model;
pub mod ops;
pub mod planner;
pub mod profile;
pub mod quant;
pub mod seed;
pub mod tensor;
pub mod textpipe;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};
