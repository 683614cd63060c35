//! Patch-overlap image retrieval: learned patch embeddings over frozen
//! backbone features, exact radius search with TF-IDF weighted voting,
//! geometric patch supervision and pose-graph construction.

pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod index;
pub mod io;
pub mod pipeline;
pub mod posegraph;
pub mod synthetic;
pub mod types;

pub use error::{Result, VopError};
