//! Collaborative multi-expert learning for long-tailed graph-level
//! classification.
//!
//! The crate trains an ensemble of expert networks on graph datasets whose
//! class sizes decay along a power law. Each expert couples a message-passing
//! encoder with balanced contrastive representation learning and a
//! class-frequency-adjusted classifier; the experts are combined through a
//! learned gating function and kept in agreement by a disentangled
//! inter-expert distillation loss.
//!
//! Module map:
//!
//! - [`tensor`] — reverse-mode autodiff on dense f64 matrices.
//! - [`data`] — graph model, TU-format ingestion, synthetic motif corpora,
//!   power-law resampling and balanced splits.
//! - [`augment`] — the four stochastic graph augmentations.
//! - [`expert`] — encoder, projector, classifier, anchors and gating
//!   prototype of a single expert, plus the expert bank.
//! - [`losses`] — per-expert loss kernels: balanced contrastive loss,
//!   balanced predicted probability, hard-class mining.
//! - [`ensemble`] — gating, fusion, disentangled distillation, total loss and
//!   test-time fusion.
//! - [`config`], [`optim`], [`metrics`], [`train`], [`ablation`],
//!   [`checkpoint`] — the run harness: declarative configs, Adam, grouped
//!   accuracy reporting, the training loop with its baselines, the component
//!   ablation matrix, and bit-exact model serialization.

pub mod ablation;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod expert;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod seeding;
pub mod tensor;
pub mod train;
