//! Sequential recommendation over per-user multi-view interest hypergraphs
//! whose hyperedges come from LLM profiling, with learned hyperedge weights,
//! structure-learning cuts and a gated fusion with a sequence encoder.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod hypergraph;
pub mod llm;
pub mod model;
pub mod pipeline;
pub mod structure;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
