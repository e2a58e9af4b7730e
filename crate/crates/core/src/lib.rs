//! Failure-aware scenario recommendation and self-evolving scenario repair
//! for driving policies.
//!
//! The pipeline evaluates a policy on a route set, mines failure patterns from
//! the resulting logs, retrieves matching scenarios from a bank, refines the
//! selection through reflection, fine-tunes the policy on the selected
//! scenarios and re-evaluates it.

pub mod analysis;
pub mod bank;
pub mod embed;
pub mod error;
pub mod fixture;
pub mod harness;
pub mod llm;
pub mod recommend;
pub mod repair;
pub mod scenario;

pub use analysis::{FailureCategory, FailurePattern};
pub use bank::{ScenarioBank, ScenarioRecord};
pub use embed::Embedder;
pub use error::{Error, Result, Stage};
pub use harness::{InfractionEvent, PerformanceLog, PolicyParams, Route};
pub use llm::{LlmClient, LlmConfig, LlmMode};
pub use scenario::{ScenarioAttributes, ScenarioText};
