//! Weight-space learning toolkit: checkpoint ingestion, weight tokenization,
//! a sequence autoencoder trained with reconstruction and contrastive
//! objectives, latent-space weight generation and desk-scale benchmarks.

pub mod checkpoint;
pub mod generation;
pub mod model;
pub mod pipeline;
pub mod tokenizer;
pub mod training;
pub mod zoo_bench;
