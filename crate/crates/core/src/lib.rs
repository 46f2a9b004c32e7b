//! Exploratory annealed decoding for RL with verifiable rewards, at desk scale.
//!
//! A tiny recurrent policy is trained with clipped policy-gradient objectives
//! on synthetic, rule-verified tasks while rollouts are sampled under a
//! per-token temperature schedule that starts hot and cools within each
//! response. See the README for the experiment suite and CLI.

pub mod distribution;
pub mod metrics;
pub mod objectives;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod runner;
pub mod schedule;
pub mod tasks;
