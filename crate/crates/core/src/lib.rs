pub mod backbone;
pub mod compressor;
pub mod container;
pub mod error;
pub mod harness;
pub mod numeric;
pub mod segmenter;
pub mod semtree;
pub mod trainer;

pub use error::{Error, Result};
