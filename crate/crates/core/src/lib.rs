//! Entity linking core: corpus handling, dual-encoder retrieval, an exact
//! cosine index, and a cross-attention reranker, all generic over the scalar
//! type.

pub mod checkpoint;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod index;
pub mod math;
pub mod reranker;
pub mod retriever;
pub mod scalar;
pub mod synth;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;
