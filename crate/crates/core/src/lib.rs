pub mod attention;
pub mod attn_export;
pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod enhancement;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
