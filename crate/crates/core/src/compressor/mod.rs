//! Plan, encode and aggregate a token stream into a semantic tree, then
//! generate from it.

mod export;
mod generate;
pub mod pipeline;
mod session;

pub use export::MAGIC as SESSION_MAGIC;
pub use pipeline::NodeState;
pub use session::{CompressionSession, StepOutput, Turn};
