//! Desk-scale laboratory for test-time adaptation under label distribution shift.
//!
//! The crate builds small Gaussian-mixture classification benchmarks, pretrains
//! an MLP classifier with batch normalization, and then studies what happens when
//! the test stream's class distribution is skewed: batch-norm statistics follow
//! the skew and predictions drift in characteristic confusion patterns.
//!
//! Three kinds of tooling live here:
//!
//! * baseline test-time adapters ([`adapt`]): eval-mode inference, batch-stat
//!   replacement, entropy minimization, and confident pseudo-labeling;
//! * a prediction refiner ([`refiner`]) trained between pretraining and test
//!   time on synthetic class-imbalanced batches; it maps a cheap batch signature
//!   (mean prediction and mean deviation from uniform) to an affine logit
//!   correction that is composed with any of the baselines;
//! * a closed-form verifier ([`theory`]) for a four-class Gaussian toy model
//!   where the effect of mean centering under label shift is exactly computable,
//!   plus the least-squares optimal refinement matrix for linear centroid models.
//!
//! [`harness`] wires everything into config-driven, seeded, byte-deterministic
//! experiment commands; the `shiftlab` binary is a thin CLI over those.

pub mod adapt;
pub mod check;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod refiner;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
