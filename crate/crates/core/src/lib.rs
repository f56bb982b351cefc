//! Adversarial co-evolution engine for prompt-injection attacks and
//! detection defenses over an LLM-graded task.
//!
//! The engine alternates attacker and defender optimization cycles: each
//! side refines its prompts with textual gradients (natural-language
//! feedback from a model), keeps a top-k pool of the strongest candidates,
//! and selects a per-cycle best on a held-out validation split. Runs are
//! checkpointable and, with the scripted backend, fully deterministic.

pub mod coevolution;
pub mod corpus;
pub mod domain;
pub mod gateway;
pub mod grader;
pub mod optimizer;
pub mod report;
pub mod scoring;
pub mod synthetic;

pub use domain::{validate_config, ConfigError, RunConfig};
