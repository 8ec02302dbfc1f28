//! Engine for multi-round, multi-agent LLM discussions driven by
//! policy-parameterised prompts.
//!
//! Each agent's turn is produced by assembling a prompt from weighted
//! components (persona/task, shared discussion memory, retrieved evidence),
//! where the weights select tiered micro-instructions and can adapt across
//! rounds. The crate also ships deterministic offline backends, a
//! five-metric evaluator, and a grid harness that writes transcripts,
//! per-utterance metrics and aggregate reports.

pub mod backends;
pub mod domain;
pub mod engine;
pub mod harness;
pub mod knowledge;
pub mod metrics;
pub mod policy;
pub mod scenario;
pub mod scheduler;
