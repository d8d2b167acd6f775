//! Objective-level out-of-distribution detection laboratory.
//!
//! A small feedforward network is trained with one of four supervised
//! objectives (cross-entropy, triplet, prototype/GCPL, one-vs-all average
//! precision), scored with the inference rule that naturally belongs to
//! that objective, and evaluated by ID accuracy and near/far-OOD AUROC.
//! Multi-seed runs are compared with Welch's t-test.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense vectors and matrices, softmax, distances, seeded
//!   randomness, finite-difference gradient checks.
//! - [`datasets`]: synthetic Gaussian-mixture ID data with near/far OOD
//!   companions, CSV I/O and seeded splits.
//! - [`model`]: the MLP, backpropagation, momentum SGD with cosine
//!   annealing, and the training loop.
//! - [`objectives`]: the four losses and their output gradients.
//! - [`scoring`]: predictions and OOD scores (higher = more OOD).
//! - [`eval`]: accuracy, AUROC, Welch's t-test and run aggregation.
//! - [`experiment`]: configuration, presets, multi-seed orchestration,
//!   persistence and reports.

pub mod datasets;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod scoring;

pub use error::{Error, Result};
