//! Entropy-gated on-policy self-distillation at desk scale.
//!
//! Token credit combines a rollout's reward direction, a clipped
//! teacher–student likelihood ratio, and a confidence gate on normalized
//! teacher entropy (optionally replaced by a causal lookahead minimum). The
//! crate trains a toy linear-softmax policy against a privileged teacher and
//! ships numerical audits for every formula involved.

pub mod checks;
pub mod commands;
pub mod credit;
pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod gate;
pub mod io;
pub mod optim;
pub mod policy;
pub mod reward;
pub mod theory;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use exec::Execution;
pub use types::{Method, RolloutTrace, TeacherSchedule, TokenCredit, TokenRecord, TrainConfig};
