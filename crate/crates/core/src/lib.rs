//! Citation intent classification with cloze prompts and
//! knowledge-expanded verbalizers.

pub mod backend;
pub mod corpus;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod kpt;
pub mod metrics;
pub mod prompt;
pub mod train;
pub mod verbalizer;
pub mod vocab;

pub use error::{Error, ErrorKind, Result};

/// Version string embedded in every artifact.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
