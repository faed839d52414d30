//! Sequence autoencoder over weight tokens: a transformer encoder producing
//! one latent per token, a transformer decoder reconstructing the tokens and
//! a projection head feeding the contrastive objective. All math is `f64`
//! with hand-written reverse-mode gradients.

mod layers;
mod loss;
mod network;
mod objective;
mod params;

pub use layers::{gelu, gelu_grad, NORM_EPS};
pub use loss::{ntxent_loss, ntxent_with_grad, recon_loss, recon_loss_with_grad, total_loss};
pub use network::{decode, encode, project, LatentSequence, ProjectedEmbedding};
pub use objective::{backward, batch_loss, BatchGradient, ChunkPair, LossParts, ObjectiveWeights};
pub use params::{
    AttentionSlots, AutoencoderConfig, AutoencoderWeights, BlockSlots, LinearSlots, ModelIndex, NormSlots, Slot,
};

use crate::checkpoint::CheckpointError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("every row of the chunk is padding")]
    AllMasked,
    #[error("mask has no unmasked entries")]
    EmptyMask,
    #[error("contrastive loss needs at least two pairs")]
    SinglePair,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}
