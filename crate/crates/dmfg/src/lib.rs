//! Decentralized mean field games, end to end.
//!
//! The crate has three layers:
//!
//! * exact machinery for finite games: probability primitives ([`prob`]),
//!   the decentralized mean field operator with its fixed-point solver,
//!   equilibrium verification and occupancy measures ([`tabular`]);
//! * model-free learning: a small dense network with exact backprop ([`nn`])
//!   and decentralized agents built on it ([`learners`]) — DMFG-QL and
//!   DMFG-AC with a trained mean-field estimator, plus the IL / MFQ / MFAC
//!   baselines;
//! * experiments: seedable multi-agent grid environments ([`envs`]) and a
//!   deterministic self-play training / tournament harness ([`harness`]).
//!
//! Everything is deterministic given a master seed; no global RNG is used
//! anywhere.

pub mod envs;
pub mod harness;
pub mod learners;
pub mod nn;
pub mod prob;
pub mod tabular;

mod seeding;

pub use seeding::seed_for;
