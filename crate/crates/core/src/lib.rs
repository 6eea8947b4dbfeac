pub mod blocking;
pub mod config;
pub mod ctc;
pub mod decode;
pub mod error;
pub mod eval;
pub mod grad;
pub mod labels;
pub mod model;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
