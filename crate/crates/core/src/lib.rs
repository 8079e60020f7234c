//! Representation learning on functional connectomes.
//!
//! This crate implements a desk-scale pipeline for learning graph
//! representations of region-level brain signals:
//!
//! - [`tensor`] / [`graph`]: dense f64 tensors and a reverse-mode
//!   differentiation tape with exact, finite-difference-verified gradients.
//! - [`connectome`]: subjects, correlation graphs, sub-sequence sampling,
//!   dataset files, and a seeded synthetic multi-site generator.
//! - [`stgcn`]: the spatio-temporal graph-convolutional feature extractor and
//!   its classifier/projector heads.
//! - [`objectives`]: contrastive, cross-entropy, and combined losses.
//! - [`metatrain`]: the bi-level training loop (inner head adaptation, outer
//!   extractor update) plus single-loop, fine-tuning and self-supervised
//!   ablation modes.
//! - [`probe`]: frozen-model embeddings, PCA, linear classifiers, stratified
//!   cross-validation with AUC, significance tests, and feature-importance
//!   maps.
//! - [`transport`]: earth mover's distance between feature histograms and the
//!   derived domain-similarity score.
//!
//! Everything is deterministic given a seed: randomness flows through named
//! sub-streams (see [`rng`]) and all reductions use fixed summation orders.

pub mod connectome;
pub mod error;
pub mod graph;
pub mod metatrain;
pub mod objectives;
pub mod params;
pub mod probe;
pub mod rng;
pub mod stgcn;
pub mod tensor;
pub mod transport;

pub use error::{CoreError, Result};
pub use graph::{Graph, Var};
pub use params::{ParamTree, Selector, VarTree};
pub use tensor::Tensor;
