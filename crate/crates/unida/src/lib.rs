//! Universal domain adaptation (UniDA) toolkit.
//!
//! Implements a two-stage pipeline for adapting a classifier to a target
//! domain whose label set overlaps the source label set in an unknown way,
//! with or without access to the original source data:
//!
//! 1. **Source data generation (SDG)** — when the source dataset is
//!    unavailable, a conditional generator is trained against the frozen
//!    pre-trained source model to synthesize a class-balanced surrogate
//!    source domain, using a classifier loss for content recovery and a
//!    Gram-matrix style loss for target-style diversity.
//! 2. **Model adaptation (MA)** — synthetic (or real) source features and
//!    target features are aligned adversarially through a gradient-reversal
//!    discriminator, with every sample weighted by a transferable weight
//!    built from domain similarity and prediction confidence. At test time
//!    the same weight thresholds unknown-class rejection.
//!
//! The crate ships a deterministic experiment harness (synthetic desk-scale
//! datasets, run manifests, metric reports, sweeps and plots) sized so a
//! complete run finishes in minutes on a laptop CPU.
//!
//! Batch-level inner loops are data-parallel via rayon when the `parallel`
//! feature (default) is enabled; disabling it falls back to sequential
//! loops with identical results.

pub mod dataset;
pub mod eval;
pub mod exec;
pub mod experiment;
pub mod ma;
pub mod nn;
pub mod rng;
pub mod sdg;
pub mod synth;

pub use dataset::{build_unida_task, jaccard_index, DomainDataset, DomainRole, LabelSet, UniDATask};
pub use experiment::ExperimentConfig;
