//! Chart reasoning data synthesis: complexity scoring of charts by rollout
//! posterior entropy, sandboxed rendering, answer-first QA construction,
//! trace filtering and corpus diagnostics.

pub mod answer;
pub mod broker;
pub mod cot_filter;
pub mod diagnostics;
pub mod forge;
pub mod gateway;
pub mod pipeline;
pub mod prompts;
pub mod qa;
pub mod rpe;
pub mod store;
