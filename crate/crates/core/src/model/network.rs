//! Encoder, decoder and projection head.

use ndarray::{Array1, Array2, ArrayView2};

use crate::tokenizer::{Position, TokenChunk};

use super::layers::{self, BlockCache, NormCache};
use super::params::{AutoencoderWeights, ModelIndex};
use super::ModelError;

/// One latent vector per input token row.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub latents: Array2<f64>,
    pub positions: Vec<Position>,
    pub mask: Array2<f64>,
}

impl LatentSequence {
    pub fn row_valid(&self) -> Vec<bool> {
        row_valid(&self.mask)
    }
}

/// Unit-norm chunk embedding used by the contrastive objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedEmbedding(pub Array1<f64>);

pub(crate) fn row_valid(mask: &Array2<f64>) -> Vec<bool> {
    mask.rows().into_iter().map(|r| r.iter().any(|&m| m != 0.0)).collect()
}

/// Sum of the three position-table rows for each token.
fn position_embedding(p: &[f64], idx: &ModelIndex, positions: &[Position], window: usize) -> Array2<f64> {
    let (pn, pl, pk) = (idx.pos_n.view(p), idx.pos_l.view(p), idx.pos_k.view(p));
    let mut out = Array2::zeros((positions.len(), idx.pos_n.cols));
    for (mut row, pos) in out.rows_mut().into_iter().zip(positions) {
        row.assign(&pn.row(pos.n % window));
        row += &pl.row(pos.l.min(idx.pos_l.rows - 1));
        row += &pk.row(pos.k.min(idx.pos_k.rows - 1));
    }
    out
}

fn position_embedding_back(g: &mut [f64], idx: &ModelIndex, positions: &[Position], window: usize, d: &Array2<f64>) {
    for (row, pos) in d.rows().into_iter().zip(positions) {
        idx.pos_n.view_mut(g).row_mut(pos.n % window).scaled_add(1.0, &row);
        idx.pos_l.view_mut(g).row_mut(pos.l.min(idx.pos_l.rows - 1)).scaled_add(1.0, &row);
        idx.pos_k.view_mut(g).row_mut(pos.k.min(idx.pos_k.rows - 1)).scaled_add(1.0, &row);
    }
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderCache {
    tokens: Array2<f64>,
    positions: Vec<Position>,
    blocks: Vec<BlockCache>,
    norm: NormCache,
}

pub(crate) fn encoder_forward(
    w: &AutoencoderWeights,
    tokens: &ArrayView2<f64>,
    positions: &[Position],
    key_valid: &[bool],
) -> (Array2<f64>, EncoderCache) {
    let (p, idx, cfg) = (w.params(), w.index(), w.config());
    let mut x = layers::linear(p, &idx.input, tokens) + position_embedding(p, idx, positions, cfg.window);
    let mut blocks = Vec::with_capacity(idx.encoder.len());
    for slots in &idx.encoder {
        let (y, cache) = layers::block(p, slots, &x.view(), cfg.num_heads, key_valid);
        blocks.push(cache);
        x = y;
    }
    let (z, norm) = layers::layer_norm(p, &idx.encoder_norm, &x.view());
    (z, EncoderCache { tokens: tokens.to_owned(), positions: positions.to_vec(), blocks, norm })
}

pub(crate) fn encoder_backward(w: &AutoencoderWeights, g: &mut [f64], cache: &EncoderCache, dz: &Array2<f64>) {
    let (p, idx, cfg) = (w.params(), w.index(), w.config());
    let mut dx = layers::layer_norm_back(p, g, &idx.encoder_norm, &cache.norm, &dz.view());
    for (slots, bc) in idx.encoder.iter().zip(&cache.blocks).rev() {
        dx = layers::block_back(p, g, slots, bc, &dx.view(), cfg.num_heads);
    }
    position_embedding_back(g, idx, &cache.positions, cfg.window, &dx);
    layers::linear_back(p, g, &idx.input, &cache.tokens.view(), &dx.view());
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderCache {
    positions: Vec<Position>,
    blocks: Vec<BlockCache>,
    norm: NormCache,
    normed: Array2<f64>,
}

pub(crate) fn decoder_forward(
    w: &AutoencoderWeights,
    z: &ArrayView2<f64>,
    positions: &[Position],
    key_valid: &[bool],
) -> (Array2<f64>, DecoderCache) {
    let (p, idx, cfg) = (w.params(), w.index(), w.config());
    let mut x = z + &position_embedding(p, idx, positions, cfg.window);
    let mut blocks = Vec::with_capacity(idx.decoder.len());
    for slots in &idx.decoder {
        let (y, cache) = layers::block(p, slots, &x.view(), cfg.num_heads, key_valid);
        blocks.push(cache);
        x = y;
    }
    let (normed, norm) = layers::layer_norm(p, &idx.decoder_norm, &x.view());
    let out = layers::linear(p, &idx.output, &normed.view());
    (out, DecoderCache { positions: positions.to_vec(), blocks, norm, normed })
}

/// Returns the gradient w.r.t. the latent input.
pub(crate) fn decoder_backward(
    w: &AutoencoderWeights,
    g: &mut [f64],
    cache: &DecoderCache,
    dout: &Array2<f64>,
) -> Array2<f64> {
    let (p, idx, cfg) = (w.params(), w.index(), w.config());
    let dnormed = layers::linear_back(p, g, &idx.output, &cache.normed.view(), &dout.view());
    let mut dx = layers::layer_norm_back(p, g, &idx.decoder_norm, &cache.norm, &dnormed.view());
    for (slots, bc) in idx.decoder.iter().zip(&cache.blocks).rev() {
        dx = layers::block_back(p, g, slots, bc, &dx.view(), cfg.num_heads);
    }
    position_embedding_back(g, idx, &cache.positions, cfg.window, &dx);
    dx
}

#[derive(Debug, Clone)]
pub(crate) struct ProjectionCache {
    latents: Array2<f64>,
    pre_activation: Array2<f64>,
    activation: Array2<f64>,
    valid: Vec<bool>,
    length: f64,
    unit: Array1<f64>,
}

/// Per-token perceptron, masked mean over real rows, then L2 normalization.
pub(crate) fn projection_forward(
    w: &AutoencoderWeights,
    z: &ArrayView2<f64>,
    valid: &[bool],
) -> Result<(Array1<f64>, ProjectionCache), ModelError> {
    let (p, idx) = (w.params(), w.index());
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(ModelError::AllMasked);
    }
    let pre_activation = layers::linear(p, &idx.proj_hidden, z);
    let activation = pre_activation.mapv(layers::gelu);
    let per_token = layers::linear(p, &idx.proj_out, &activation.view());
    let mut pooled = Array1::zeros(per_token.ncols());
    for (row, _) in per_token.rows().into_iter().zip(valid).filter(|(_, &v)| v) {
        pooled += &row;
    }
    pooled /= count as f64;
    let length = pooled.dot(&pooled).sqrt();
    let unit = &pooled / length;
    if !length.is_finite() || length == 0.0 {
        return Err(ModelError::NonFinite("projection has zero length".into()));
    }
    Ok((
        unit.clone(),
        ProjectionCache { latents: z.to_owned(), pre_activation, activation, valid: valid.to_vec(), length, unit },
    ))
}

/// Returns the gradient w.r.t. the latents.
pub(crate) fn projection_backward(
    w: &AutoencoderWeights,
    g: &mut [f64],
    cache: &ProjectionCache,
    dunit: &Array1<f64>,
) -> Array2<f64> {
    let (p, idx) = (w.params(), w.index());
    let dpooled = (dunit - &(&cache.unit * cache.unit.dot(dunit))) / cache.length;
    let count = cache.valid.iter().filter(|&&v| v).count() as f64;
    let mut dper_token = Array2::zeros((cache.latents.nrows(), dpooled.len()));
    for (mut row, _) in dper_token.rows_mut().into_iter().zip(&cache.valid).filter(|(_, &v)| v) {
        row.assign(&(&dpooled / count));
    }
    let dact = layers::linear_back(p, g, &idx.proj_out, &cache.activation.view(), &dper_token.view());
    let dpre = dact * &cache.pre_activation.mapv(layers::gelu_grad);
    layers::linear_back(p, g, &idx.proj_hidden, &cache.latents.view(), &dpre.view())
}

fn check_chunk(chunk: &TokenChunk, w: &AutoencoderWeights) -> Result<(), ModelError> {
    let cfg = w.config();
    if chunk.d_t() != cfg.d_t || chunk.window() != cfg.window || chunk.positions.len() != cfg.window {
        return Err(ModelError::ShapeMismatch(format!(
            "chunk is {}x{}, model expects {}x{}",
            chunk.window(),
            chunk.d_t(),
            cfg.window,
            cfg.d_t
        )));
    }
    Ok(())
}

pub fn encode(chunk: &TokenChunk, w: &AutoencoderWeights) -> Result<LatentSequence, ModelError> {
    check_chunk(chunk, w)?;
    let (latents, _) = encoder_forward(w, &chunk.tokens.view(), &chunk.positions, &chunk.row_valid());
    Ok(LatentSequence { latents, positions: chunk.positions.clone(), mask: chunk.mask.clone() })
}

fn check_latents(z: &LatentSequence, w: &AutoencoderWeights) -> Result<(), ModelError> {
    let cfg = w.config();
    if z.latents.dim() != (cfg.window, cfg.latent_dim) || z.positions.len() != cfg.window {
        return Err(ModelError::ShapeMismatch(format!(
            "latents are {:?}, model expects ({}, {})",
            z.latents.dim(),
            cfg.window,
            cfg.latent_dim
        )));
    }
    Ok(())
}

/// Reconstructed token matrix `[window, d_t]`.
pub fn decode(z: &LatentSequence, w: &AutoencoderWeights) -> Result<Array2<f64>, ModelError> {
    check_latents(z, w)?;
    let (out, _) = decoder_forward(w, &z.latents.view(), &z.positions, &z.row_valid());
    if out.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("decoder output".into()));
    }
    Ok(out)
}

pub fn project(z: &LatentSequence, w: &AutoencoderWeights) -> Result<ProjectedEmbedding, ModelError> {
    check_latents(z, w)?;
    let (unit, _) = projection_forward(w, &z.latents.view(), &z.row_valid())?;
    Ok(ProjectedEmbedding(unit))
}
