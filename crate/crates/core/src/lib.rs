pub mod autodiff;
pub mod bench;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod sampler;
pub mod scoring;

pub use error::{Error, Result};
