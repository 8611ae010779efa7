//! Rewards, selection and verification for co-evolving a code generator and
//! a unit-test generator from a shared execution matrix.
//!
//! The pipeline: candidate responses are parsed ([`parse`]), executed against
//! generated and ground-truth tests to fill an [`ExecutionMatrix`]
//! ([`exec`]), and scored for training ([`reward`]) or for best-of-N
//! selection ([`bon`]). [`theory`] simulates the Bernoulli model of execution
//! outcomes to check how reliable the aggregated test reward is, and
//! [`gateway`] samples candidates from a chat-completions endpoint.

pub mod bon;
pub mod error;
pub mod exec;
pub mod gateway;
pub mod parse;
pub mod records;
pub mod reward;
pub mod seed;
pub mod theory;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    correctness_vector, CandidateKind, CandidateRecord, CorrectnessVector, ExecutionMatrix, Payload, Task, TestCase,
};
