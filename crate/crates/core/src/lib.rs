pub mod attnviz;
pub mod cli;
pub mod costmodel;
pub mod dataio;
pub mod error;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
