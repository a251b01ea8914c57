//! A desk-scale laboratory for reinforcement learning with verifiable rewards.
//!
//! A tiny causal transformer is trained on synthetic tasks with PPO or a
//! critic-free group-normalized objective, optionally shaped by an
//! advantage-weighted entropy bonus. The `infotheory` module enumerates tiny
//! policies exactly to check the information-theoretic identities and bounds
//! behind that bonus.

pub mod numerics;
pub mod model;
pub mod tasks;
pub mod rollout;
pub mod rlcore;
pub mod infotheory;
pub mod harness;

/// Vocabulary index of a token.
pub type TokenId = u32;
