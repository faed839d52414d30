//! Batch objective over (clean, noised) chunk pairs and its analytic
//! gradient.
//!
//! Tokens enter the network divided by `sqrt(norm)` and reconstructions are
//! scaled back by the same factor, so the reconstruction term is computed on
//! raw weights and divided by the per-model `norm`.

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::tokenizer::TokenChunk;

use super::loss::{ntxent_with_grad, recon_loss_with_grad, total_loss};
use super::network::{
    decoder_backward, decoder_forward, encoder_backward, encoder_forward, projection_backward, projection_forward,
    DecoderCache, EncoderCache, ProjectionCache,
};
use super::params::AutoencoderWeights;
use super::ModelError;

/// Two views of the same chunk plus the owning model's loss scale.
#[derive(Debug, Clone)]
pub struct ChunkPair {
    pub clean: TokenChunk,
    pub noised: TokenChunk,
    pub norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    /// Mean reconstruction loss over the clean views; `None` when `gamma == 1`.
    pub recon: Option<f64>,
    /// NT-Xent over the batch; `None` when `gamma == 0`.
    pub contrastive: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub loss: LossParts,
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveWeights {
    pub gamma: f64,
    pub temperature: f64,
}

impl ObjectiveWeights {
    fn uses_recon(&self) -> bool {
        self.gamma < 1.0
    }

    fn uses_contrastive(&self) -> bool {
        self.gamma > 0.0
    }
}

struct PairForward {
    clean_cache: EncoderCache,
    recon: Option<(f64, Array2<f64>, DecoderCache)>,
    contrastive: Option<[(Array1<f64>, ProjectionCache); 2]>,
    noised_cache: Option<EncoderCache>,
}

fn validate(pairs: &[ChunkPair], w: &AutoencoderWeights, obj: &ObjectiveWeights) -> Result<(), ModelError> {
    if !(0.0..=1.0).contains(&obj.gamma) {
        return Err(ModelError::InvalidArgument(format!("gamma {} outside [0, 1]", obj.gamma)));
    }
    if pairs.is_empty() {
        return Err(ModelError::InvalidArgument("empty batch".into()));
    }
    if obj.uses_contrastive() && pairs.len() < 2 {
        return Err(ModelError::SinglePair);
    }
    let cfg = w.config();
    for pair in pairs {
        for c in [&pair.clean, &pair.noised] {
            if c.d_t() != cfg.d_t || c.window() != cfg.window || c.positions.len() != cfg.window {
                return Err(ModelError::ShapeMismatch(format!(
                    "chunk {}x{} vs model {}x{}",
                    c.window(),
                    c.d_t(),
                    cfg.window,
                    cfg.d_t
                )));
            }
        }
        if pair.clean.mask != pair.noised.mask {
            return Err(ModelError::ShapeMismatch("views of a pair must share the mask".into()));
        }
        if !(pair.norm > 0.0 && pair.norm.is_finite()) {
            return Err(ModelError::InvalidArgument(format!("norm must be positive, got {}", pair.norm)));
        }
    }
    Ok(())
}

fn forward_pair(
    pair: &ChunkPair,
    w: &AutoencoderWeights,
    obj: &ObjectiveWeights,
    batch: usize,
) -> Result<PairForward, ModelError> {
    let scale = pair.norm.sqrt();
    let valid = pair.clean.row_valid();
    let clean_in = &pair.clean.tokens / scale;
    let (z, clean_cache) = encoder_forward(w, &clean_in.view(), &pair.clean.positions, &valid);

    let recon = if obj.uses_recon() {
        let (out, dec_cache) = decoder_forward(w, &z.view(), &pair.clean.positions, &valid);
        let recon = &out * scale;
        let (loss, dloss) =
            recon_loss_with_grad(&pair.clean.tokens.view(), &recon.view(), &pair.clean.mask.view(), pair.norm)?;
        // d(total)/d(out) = (1 - gamma) / B * dloss/d(recon) * scale
        let dout = dloss * ((1.0 - obj.gamma) / batch as f64 * scale);
        Some((loss, dout, dec_cache))
    } else {
        None
    };

    let (contrastive, noised_cache) = if obj.uses_contrastive() {
        let clean_proj = projection_forward(w, &z.view(), &valid)?;
        let noised_in = &pair.noised.tokens / scale;
        let (zn, ncache) = encoder_forward(w, &noised_in.view(), &pair.noised.positions, &valid);
        let noised_proj = projection_forward(w, &zn.view(), &valid)?;
        (Some([clean_proj, noised_proj]), Some(ncache))
    } else {
        (None, None)
    };
    Ok(PairForward { clean_cache, recon, contrastive, noised_cache })
}

fn forward_batch(
    pairs: &[ChunkPair],
    w: &AutoencoderWeights,
    obj: &ObjectiveWeights,
) -> Result<(Vec<PairForward>, LossParts, Option<Vec<Array1<f64>>>), ModelError> {
    validate(pairs, w, obj)?;
    let forwards: Vec<PairForward> = pairs
        .par_iter()
        .map(|p| forward_pair(p, w, obj, pairs.len()))
        .collect::<Result<_, _>>()?;

    let recon = obj
        .uses_recon()
        .then(|| forwards.iter().map(|f| f.recon.as_ref().expect("recon computed").0).sum::<f64>() / pairs.len() as f64);

    let (contrastive, view_grads) = if obj.uses_contrastive() {
        let views: Vec<Array1<f64>> = (0..2)
            .flat_map(|v| forwards.iter().map(move |f| f.contrastive.as_ref().expect("projected")[v].0.clone()))
            .collect();
        let (loss, grads) = ntxent_with_grad(&views, obj.temperature)?;
        (Some(loss), Some(grads))
    } else {
        (None, None)
    };

    let total = total_loss(recon.unwrap_or(0.0), contrastive.unwrap_or(0.0), obj.gamma);
    if !total.is_finite() {
        return Err(ModelError::NonFinite("batch loss".into()));
    }
    Ok((forwards, LossParts { recon, contrastive, total }, view_grads))
}

/// Forward pass only.
pub fn batch_loss(pairs: &[ChunkPair], w: &AutoencoderWeights, obj: &ObjectiveWeights) -> Result<LossParts, ModelError> {
    forward_batch(pairs, w, obj).map(|(_, loss, _)| loss)
}

/// Loss and gradient of `(1 - gamma) * mean recon + gamma * NT-Xent` with
/// respect to every parameter. The reconstruction branch is skipped entirely
/// at `gamma == 1` and the contrastive branch at `gamma == 0`. Per-pair
/// gradients are computed in parallel and summed in batch order.
pub fn backward(pairs: &[ChunkPair], w: &AutoencoderWeights, obj: &ObjectiveWeights) -> Result<BatchGradient, ModelError> {
    let (forwards, loss, view_grads) = forward_batch(pairs, w, obj)?;
    let b = pairs.len();
    let per_pair: Vec<Vec<f64>> = forwards
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let mut g = vec![0.0; w.len()];
            let mut dz = Array2::zeros((w.config().window, w.config().latent_dim));
            if let Some((_, dout, dec_cache)) = &f.recon {
                dz += &decoder_backward(w, &mut g, dec_cache, dout);
            }
            if let (Some(proj), Some(vg), Some(ncache)) = (&f.contrastive, &view_grads, &f.noised_cache) {
                let dclean = &vg[i] * obj.gamma;
                let dnoised = &vg[i + b] * obj.gamma;
                dz += &projection_backward(w, &mut g, &proj[0].1, &dclean);
                let dzn = projection_backward(w, &mut g, &proj[1].1, &dnoised);
                encoder_backward(w, &mut g, ncache, &dzn);
            }
            encoder_backward(w, &mut g, &f.clean_cache, &dz);
            g
        })
        .collect();

    let mut grad = vec![0.0; w.len()];
    for g in &per_pair {
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteGradient);
    }
    Ok(BatchGradient { loss, grad })
}
