//! Prompt-conditioned weight generation: encode a prompt model, perturb its
//! token latents with a Gaussian kernel, decode and de-tokenize.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{write_checkpoint_file, CheckpointError, TensorMap};
use crate::model::{decode, encode, AutoencoderWeights, LatentSequence, ModelError};
use crate::tokenizer::{chunk_sequence, detokenize, tokenize_model, TokenSequence, TokenizerError};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("prompt has no unmasked latents")]
    EmptyEmbedding,
    #[error("probe set is empty")]
    EmptyProbe,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("probe evaluation failed: {0}")]
    Probe(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Per-chunk latents of a prompt plus everything needed to de-tokenize.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub prompt_id: String,
    pub chunks: Vec<LatentSequence>,
    pub sequence: TokenSequence,
    pub norm: f64,
}

impl PromptEmbedding {
    /// Number of unmasked latent rows over all chunks.
    pub fn latent_count(&self) -> usize {
        self.chunks.iter().map(|c| c.row_valid().iter().filter(|&&v| v).count()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    Scott,
    Fixed(f64),
}

impl FromStr for Bandwidth {
    type Err = GenerationError;

    /// `scott` or `fixed:<h>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "scott" {
            return Ok(Bandwidth::Scott);
        }
        let h = s
            .strip_prefix("fixed:")
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| GenerationError::InvalidArgument(format!("bandwidth {s:?}: expected scott or fixed:<h>")))?;
        if !(h >= 0.0 && h.is_finite()) {
            return Err(GenerationError::InvalidArgument(format!("bandwidth {h} must be non-negative")));
        }
        Ok(Bandwidth::Fixed(h))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel {
    /// Unmasked latent rows, one per row.
    pub centers: Array2<f64>,
    pub bandwidth: f64,
    pub dim: usize,
}

/// Tokenize, chunk and encode the prompt. Tokens are scaled by the prompt's
/// runtime norm before entering the encoder.
pub fn embed_prompt(prompt: &TensorMap, w: &AutoencoderWeights) -> Result<PromptEmbedding, GenerationError> {
    let cfg = w.config();
    let sequence = tokenize_model(prompt, cfg.d_t)?;
    let norm = sequence.norm_scale();
    let inv = 1.0 / norm.sqrt();
    let chunks = chunk_sequence(&sequence, cfg.window)?
        .iter()
        .map(|c| encode(&c.scaled(inv), w))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PromptEmbedding { prompt_id: prompt.source_id().to_string(), chunks, sequence, norm })
}

/// Scott factor `n^(-1/(d+4))` times the mean per-dimension sample standard
/// deviation (ddof 1). Zero for a single latent.
pub fn scott_bandwidth(centers: &Array2<f64>) -> f64 {
    let (n, d) = centers.dim();
    if n < 2 || d == 0 {
        return 0.0;
    }
    let mean_std = centers.std_axis(ndarray::Axis(0), 1.0).mean().unwrap_or(0.0);
    (n as f64).powf(-1.0 / (d as f64 + 4.0)) * mean_std
}

/// One global kernel over every unmasked token latent of the prompt.
pub fn fit_kde(emb: &PromptEmbedding, rule: Bandwidth) -> Result<KdeModel, GenerationError> {
    let dim = emb.chunks.first().map_or(0, |c| c.latents.ncols());
    let rows: Vec<f64> = emb
        .chunks
        .iter()
        .flat_map(|c| {
            let valid = c.row_valid();
            c.latents
                .rows()
                .into_iter()
                .zip(valid)
                .filter(|(_, v)| *v)
                .flat_map(|(r, _)| r.to_vec())
                .collect::<Vec<_>>()
        })
        .collect();
    if rows.is_empty() {
        return Err(GenerationError::EmptyEmbedding);
    }
    let centers = Array2::from_shape_vec((rows.len() / dim, dim), rows).expect("rows have latent width");
    let bandwidth = match rule {
        Bandwidth::Fixed(h) if h >= 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => return Err(GenerationError::InvalidArgument(format!("bandwidth {h}"))),
        Bandwidth::Scott => {
            let h = scott_bandwidth(&centers);
            if h == 0.0 {
                log::warn!("degenerate latent spread for {}: scott bandwidth is 0", emb.prompt_id);
            }
            h
        }
    };
    Ok(KdeModel { centers, bandwidth, dim })
}

/// Replace each unmasked latent `z` by `z + h * eps`, in chunk and row order.
/// Masked rows are left untouched.
pub fn sample_latents(kde: &KdeModel, emb: &PromptEmbedding, seed: u64) -> PromptEmbedding {
    let mut out = emb.clone();
    if kde.bandwidth == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for chunk in &mut out.chunks {
        let valid = chunk.row_valid();
        for (mut row, ok) in chunk.latents.rows_mut().into_iter().zip(valid) {
            if ok {
                for v in row.iter_mut() {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    *v += kde.bandwidth * eps;
                }
            }
        }
    }
    out
}

/// Decode every chunk, undo the norm scaling and rebuild the prompt's
/// tensors from its layout.
pub fn decode_embedding(emb: &PromptEmbedding, w: &AutoencoderWeights) -> Result<TensorMap, GenerationError> {
    let scale = emb.norm.sqrt();
    let mut seq = emb.sequence.clone();
    let rows = seq.len();
    for (ci, chunk) in emb.chunks.iter().enumerate() {
        let decoded = decode(chunk, w)?;
        let start = ci * w.config().window;
        for (r, drow) in decoded.rows().into_iter().enumerate() {
            let at = start + r;
            if at >= rows {
                break;
            }
            for (j, v) in drow.iter().enumerate() {
                seq.tokens[[at, j]] = if seq.mask[[at, j]] != 0.0 { v * scale } else { 0.0 };
            }
        }
    }
    Ok(detokenize(&seq)?)
}

/// Plain reconstruction of the prompt, no sampling.
pub fn autoencode(prompt: &TensorMap, w: &AutoencoderWeights) -> Result<TensorMap, GenerationError> {
    decode_embedding(&embed_prompt(prompt, w)?, w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateModel {
    pub weights: TensorMap,
    pub prompt_id: String,
    pub seed: u64,
    /// Lower is better; `None` until ranked.
    pub probe_score: Option<f64>,
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateConfig {
    pub count: usize,
    pub base_seed: u64,
    pub bandwidth: Bandwidth,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { count: 10, base_seed: 0, bandwidth: Bandwidth::Scott }
    }
}

/// `count` candidates with seeds `base_seed + i`, generated in parallel.
pub fn generate(
    prompt: &TensorMap,
    w: &AutoencoderWeights,
    cfg: &GenerateConfig,
) -> Result<Vec<CandidateModel>, GenerationError> {
    if cfg.count == 0 {
        return Err(GenerationError::InvalidArgument("count must be at least 1".into()));
    }
    let emb = embed_prompt(prompt, w)?;
    let kde = fit_kde(&emb, cfg.bandwidth)?;
    (0..cfg.count as u64)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.base_seed.wrapping_add(i);
            let mut weights = decode_embedding(&sample_latents(&kde, &emb, seed), w)?;
            weights.set_source_id(format!("{}.gen{seed}", emb.prompt_id));
            weights.metadata_mut().insert("prompt_id".into(), emb.prompt_id.clone());
            weights.metadata_mut().insert("seed".into(), seed.to_string());
            Ok(CandidateModel { weights, prompt_id: emb.prompt_id.clone(), seed, probe_score: None, rank: None })
        })
        .collect()
}

/// Scores a candidate on a labelled probe set. Lower is better.
pub trait ProbeEvaluator: Sync {
    fn probe_len(&self) -> usize;
    fn score(&self, weights: &TensorMap) -> Result<f64, GenerationError>;
}

/// Score every candidate and keep the best `m`, ranked 1..=m. Ties go to the
/// lower seed.
pub fn rank_candidates(
    mut candidates: Vec<CandidateModel>,
    probe: &dyn ProbeEvaluator,
    m: usize,
) -> Result<Vec<CandidateModel>, GenerationError> {
    if probe.probe_len() == 0 {
        return Err(GenerationError::EmptyProbe);
    }
    if m == 0 || m > candidates.len() {
        return Err(GenerationError::InvalidArgument(format!("keep {m} of {} candidates", candidates.len())));
    }
    let scores = candidates.par_iter().map(|c| probe.score(&c.weights)).collect::<Result<Vec<_>, _>>()?;
    for (c, s) in candidates.iter_mut().zip(scores) {
        c.probe_score = Some(s);
        c.weights.metadata_mut().insert("probe_score".into(), format!("{s:e}"));
    }
    candidates.sort_by(|a, b| {
        let (sa, sb) = (a.probe_score.unwrap_or(f64::NAN), b.probe_score.unwrap_or(f64::NAN));
        sa.total_cmp(&sb).then(a.seed.cmp(&b.seed))
    });
    candidates.truncate(m);
    for (i, c) in candidates.iter_mut().enumerate() {
        c.rank = Some(i + 1);
    }
    Ok(candidates)
}

/// Writes `{prompt_id}.gen{seed}.safetensors` into `dir`.
pub fn save_candidate(dir: &Path, candidate: &CandidateModel) -> Result<PathBuf, GenerationError> {
    let path = dir.join(format!("{}.gen{}.safetensors", candidate.prompt_id, candidate.seed));
    write_checkpoint_file(&path, &candidate.weights)?;
    Ok(path)
}
