//! Deterministic simulation of TPM-backed transitive trust.
//!
//! A seeded world of principals and agents, each agent carrying a simulated
//! TPM, runs the restriction, subordination and transposition protocols over
//! a turn-based message fabric with a scriptable adversary. Every run yields a
//! transcript that the invariant suites in [`report`] check.

pub mod channels;
pub mod codec;
pub mod config;
pub mod credentials;
pub mod crypto;
pub mod fabric;
pub mod operations;
pub mod report;
pub mod scenarios;
pub mod tpm;
pub mod wire;
pub mod world;
