//! Deterministic core for multi-attribution conversion-rate modeling.
//!
//! Everything in this crate is `no_std` (alloc only) and free of platform
//! entropy: every stochastic draw routes through the counter-based PRNG in
//! [`rng`], so identical seeds produce identical bytes on any platform.
//!
//! The crate covers the full modeling loop at desk scale:
//!
//! * [`journey`] — synthetic ad-click journeys with a known ground-truth
//!   conversion process, so attribution quality is measurable.
//! * [`attribution`] — per-click credit under last-click, first-click,
//!   linear, time-decay, removal-effect and Shapley mechanisms, Cartesian
//!   composite (CAT) labels, and weighted training samples.
//! * [`graph`] / [`tensor`] / [`optim`] — a small reverse-mode autodiff
//!   engine (embeddings, dense layers, weighted BCE, softmax CE, Adam)
//!   with a finite-difference gradient checker.
//! * [`malnet`] — the shared-bottom multi-task model: attribution towers,
//!   CAT tower, and the fused primary-target head, plus its ablations.
//! * [`metrics`] — weighted AUC and click-weighted grouped AUC (GAUC) with
//!   grouped lift breakdowns.

#![no_std]

extern crate alloc;

pub mod attribution;
pub mod digest;
pub mod error;
pub mod graph;
pub mod journey;
pub mod malnet;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::MalError;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, MalError>;
