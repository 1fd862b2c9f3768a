//! Prediction-driven KV-cache eviction and prefetch for multi-agent LLM
//! serving, with a step-based simulator and empirical checks of the
//! score's error bounds.

pub mod cache;
pub mod callgraph;
pub mod cli;
pub mod policies;
pub mod predictor;
pub mod scoring;
pub mod simulator;
pub mod theory;
