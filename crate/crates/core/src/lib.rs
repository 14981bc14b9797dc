//! An RL agent that learns a joint policy over gridworld actions and
//! natural-language predicate questions posed to a truth-telling oracle,
//! trained in a small procedurally generated MultiRoom world and transferred
//! to a larger one.

pub mod agent;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod grid;
pub mod harness;
pub mod metrics;
pub mod mi;
pub mod oracle;
pub mod training;

pub use gridqa_autodiff as autodiff;
