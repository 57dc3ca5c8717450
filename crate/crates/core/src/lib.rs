//! Latent Bayesian optimization over discrete token sequences.
//!
//! Sequences are embedded token-by-token into unit-norm vectors, pushed
//! through an invertible autoregressive flow into a Gaussian latent space,
//! and searched there with trust-region candidate sampling, an exact GP
//! surrogate and Thompson sampling. Decoding is the exact left inverse of
//! encoding, so every evaluated sequence is reconstructed without loss.
//!
//! Module map:
//!
//! - [`vocab`]: embedding table and the nearest-embedding token map
//! - [`seqflow`]: the autoregressive coupling flow and its q′ sampler
//! - [`training`]: loss assembly, backpropagation and the SGD trainer
//! - [`surrogate`]: exact GP with a learned linear projection, Thompson sampling
//! - [`tacs`]: token importance scores, perturbation probabilities, trust regions
//! - [`objectives`]: synthetic black-box sequence objectives
//! - [`boloop`]: the optimization loop and its diagnostics
//! - [`config`]: the run configuration file

mod binio;
pub mod boloop;
pub mod config;
pub mod error;
pub mod matrix;
pub mod objectives;
pub mod rng;
pub mod seqflow;
pub mod surrogate;
pub mod tacs;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use matrix::{ContinuousRep, LatentSeq, SeqMatrix};
pub use seqflow::{FlowConfig, FlowModel, SeqFlow};
pub use vocab::{EmbeddingTable, TokenSequence, Vocabulary, PAD};
