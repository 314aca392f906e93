pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod denoising;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod matching;
pub mod model;
pub mod nn;
pub mod ops;
pub mod query_init;
pub mod train;

pub use error::{Error, Result};
