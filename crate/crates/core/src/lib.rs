//! Automated knowledge-component generation and knowledge tracing for
//! open-ended programming problems.
//!
//! The library is organized around two halves:
//!
//! * a KC generation pipeline ([`pipeline`]) that turns raw student code
//!   submissions into named knowledge components, clusters them at a
//!   controllable abstraction level, and emits a problem-by-KC Q-matrix;
//! * a knowledge-tracing model ([`kt`]) that tracks per-student mastery of
//!   those KCs with a recurrent state, injects mastery into a causal LM
//!   backbone as soft true/false tokens, and jointly predicts response
//!   correctness and the student's next code submission.
//!
//! Supporting modules cover dataset ingestion ([`data`]), chat-LLM access
//! with caching and a deterministic mock ([`llm`]), pluggable embeddings
//! ([`embed`]), prediction metrics ([`eval`]), and learning-curve / PFA
//! analysis ([`curves`]).

pub mod concepts;
pub mod curves;
pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod hash;
pub mod kt;
pub mod lang;
pub mod llm;
pub mod pipeline;

pub use error::{Error, Result};
