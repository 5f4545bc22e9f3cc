//! Invariant rationalization toolkit.
//!
//! The crate has five parts:
//!
//! - [`oracle`]: exact enumeration over a small discrete causal graph
//!   (conditionals, entropies, invariance tests, and a brute-force
//!   saddle-point check against adversarial test environments).
//! - [`tape`]: a minimal reverse-mode differentiation core over dense
//!   `f64` arrays, with straight-through estimation and Adam.
//! - [`game`]: the three-player rationale game — a mask generator, an
//!   environment-agnostic predictor, and an environment-aware predictor
//!   trained by alternating descent/ascent.
//! - [`datagen`]: synthetic corpora with known causal and spurious
//!   channels (bias-token injection, correlated multi-aspect reviews).
//! - [`eval`]: selection metrics (token P/R/F1, bias-selection rate,
//!   invariance gap) and an HTML highlight report.

pub mod datagen;
pub mod eval;
pub mod game;
pub mod oracle;
pub mod tape;
