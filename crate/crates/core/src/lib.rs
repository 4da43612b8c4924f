//! Conformal act-or-escalate decisions for multi-agent debates.
//!
//! Agents' verbalized label distributions are pooled into a social belief,
//! split-conformal thresholds are calibrated per round, and each prediction
//! set maps to automate, escalate or full review.

pub mod conformal;
pub mod debate;
pub mod domain;
pub mod elicit;
pub mod eval;
pub mod pool;
pub mod seeding;
pub mod sim;
pub mod stopping;
pub mod transcript;

pub use domain::*;
