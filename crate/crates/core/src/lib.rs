//! Tree-structured search over GPU kernel candidates driven by plan, code
//! and debug agents.

pub mod agents;
pub mod anchors;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod orchestrator;
pub mod policy;
pub mod rng;
pub mod templates;
pub mod tree;
pub mod window;
