//! Weight tokenization.
//!
//! Each layer is reshaped into a 2-D matrix; every row is zero-padded to a
//! multiple of the token width `d_t` and cut into tokens, so tokens never
//! straddle rows. A mask marks real parameters with 1 and padding with 0.

use std::collections::BTreeMap;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointError, Dtype, TensorMap, TensorRecord};

pub const TOKENS_KEY: &str = "__tokens__";
pub const MASK_KEY: &str = "__mask__";
pub const POSITIONS_KEY: &str = "__positions__";

/// Token width used by the desk-scale configuration.
pub const DEFAULT_TOKEN_DIM: usize = 16;
/// Token width of the full-scale configuration.
pub const FULL_SCALE_TOKEN_DIM: usize = 230;

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error("tensor {name} has rank {rank}; at most 4 is supported")]
    RankUnsupported { name: String, rank: usize },
    #[error("token width must be at least 1")]
    ZeroTokenDim,
    #[error("window must be at least 1")]
    ZeroWindow,
    #[error("model has no tensors")]
    EmptyModel,
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("layout sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

/// Position of a token: global index `n`, layer index `l`, index `k` within
/// the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Position {
    pub n: usize,
    pub l: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub name: String,
    pub original_shape: Vec<usize>,
    pub dtype: Dtype,
    pub matrix_rows: usize,
    pub matrix_cols: usize,
    pub first_token_index: usize,
    pub tokens_per_row: usize,
}

impl LayerLayout {
    pub fn token_count(&self) -> usize {
        self.matrix_rows * self.tokens_per_row
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    pub mask: Array2<f64>,
    pub positions: Vec<Position>,
    pub layout: Vec<LayerLayout>,
    pub d_t: usize,
    pub source_id: String,
    pub metadata: BTreeMap<String, String>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of mask entries equal to 1.
    pub fn real_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0.0).count()
    }

    /// Variance of the unmasked token values, used as the per-model loss
    /// scale. Falls back to 1 when the values are constant.
    pub fn norm_scale(&self) -> f64 {
        unmasked_variance(self.tokens.iter().zip(self.mask.iter()))
            .filter(|v| *v > 0.0 && v.is_finite())
            .unwrap_or(1.0)
    }
}

fn unmasked_variance<'a>(pairs: impl Iterator<Item = (&'a f64, &'a f64)> + Clone) -> Option<f64> {
    let (count, sum) = pairs
        .clone()
        .filter(|(_, &m)| m != 0.0)
        .fold((0usize, 0.0), |(c, s), (&v, _)| (c + 1, s + v));
    if count == 0 {
        return None;
    }
    let mean = sum / count as f64;
    let ss: f64 = pairs.filter(|(_, &m)| m != 0.0).map(|(&v, _)| (v - mean) * (v - mean)).sum();
    Some(ss / count as f64)
}

/// A fixed-length window of tokens. Padding rows sit at the tail with an
/// all-zero mask and a default position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenChunk {
    pub tokens: Array2<f64>,
    pub mask: Array2<f64>,
    pub positions: Vec<Position>,
    pub pad_rows: usize,
    pub model_id: String,
    pub chunk_index: usize,
}

impl TokenChunk {
    pub fn window(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn d_t(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn real_rows(&self) -> usize {
        self.window() - self.pad_rows
    }

    /// Rows that carry at least one real parameter.
    pub fn row_valid(&self) -> Vec<bool> {
        self.mask.rows().into_iter().map(|r| r.iter().any(|&m| m != 0.0)).collect()
    }

    pub fn scaled(&self, factor: f64) -> TokenChunk {
        TokenChunk { tokens: &self.tokens * factor, ..self.clone() }
    }
}

fn matrix_dims(record: &TensorRecord) -> Result<(usize, usize), TokenizerError> {
    let shape = record.shape();
    Ok(match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        3 => (shape[0], shape[1] * shape[2]),
        4 => (shape[0], shape[1] * shape[2] * shape[3]),
        rank => return Err(TokenizerError::RankUnsupported { name: record.name().to_string(), rank }),
    })
}

/// Row-major 2-D view of a tensor: rank-1 becomes a single row, higher ranks
/// keep the leading axis as rows and flatten the rest into columns.
pub fn layer_to_matrix(record: &TensorRecord) -> Result<Array2<f64>, TokenizerError> {
    let (rows, cols) = matrix_dims(record)?;
    Ok(Array2::from_shape_vec((rows, cols), record.values().to_vec()).expect("dims match numel"))
}

/// Inverse of [`layer_to_matrix`].
pub fn matrix_to_layer(
    name: &str,
    original_shape: &[usize],
    dtype: Dtype,
    matrix: &Array2<f64>,
) -> Result<TensorRecord, TokenizerError> {
    let values: Vec<f64> = matrix.iter().copied().collect();
    Ok(TensorRecord::new(name, original_shape.to_vec(), dtype, values)?)
}

pub fn tokenize_model(map: &TensorMap, d_t: usize) -> Result<TokenSequence, TokenizerError> {
    if d_t == 0 {
        return Err(TokenizerError::ZeroTokenDim);
    }
    if map.is_empty() {
        return Err(TokenizerError::EmptyModel);
    }
    let mut layout = Vec::with_capacity(map.len());
    let mut total = 0usize;
    for record in map.records() {
        let (rows, cols) = matrix_dims(record)?;
        let tokens_per_row = cols.div_ceil(d_t);
        layout.push(LayerLayout {
            name: record.name().to_string(),
            original_shape: record.shape().to_vec(),
            dtype: record.dtype(),
            matrix_rows: rows,
            matrix_cols: cols,
            first_token_index: total,
            tokens_per_row,
        });
        total += rows * tokens_per_row;
    }

    let mut tokens = Array2::<f64>::zeros((total, d_t));
    let mut mask = Array2::<f64>::zeros((total, d_t));
    let mut positions = Vec::with_capacity(total);
    for (l, (record, lay)) in map.records().iter().zip(&layout).enumerate() {
        let values = record.values();
        for row in 0..lay.matrix_rows {
            let row_vals = &values[row * lay.matrix_cols..(row + 1) * lay.matrix_cols];
            for t in 0..lay.tokens_per_row {
                let k = row * lay.tokens_per_row + t;
                let n = lay.first_token_index + k;
                let piece = &row_vals[t * d_t..((t + 1) * d_t).min(lay.matrix_cols)];
                for (j, &v) in piece.iter().enumerate() {
                    tokens[[n, j]] = v;
                    mask[[n, j]] = 1.0;
                }
                positions.push(Position { n, l, k });
            }
        }
    }

    Ok(TokenSequence {
        tokens,
        mask,
        positions,
        layout,
        d_t,
        source_id: map.source_id().to_string(),
        metadata: map.metadata().clone(),
    })
}

/// Rebuilds the tensor map from a token sequence using its layout. Values
/// under a zero mask are never read.
pub fn detokenize(seq: &TokenSequence) -> Result<TensorMap, TokenizerError> {
    let expected: usize = seq.layout.iter().map(LayerLayout::token_count).sum();
    if seq.tokens.nrows() != expected || seq.mask.dim() != seq.tokens.dim() || seq.tokens.ncols() != seq.d_t {
        return Err(TokenizerError::LayoutMismatch(format!(
            "layout implies {expected} tokens of width {}, sequence has {:?}",
            seq.d_t,
            seq.tokens.dim()
        )));
    }
    let d_t = seq.d_t;
    let mut records = Vec::with_capacity(seq.layout.len());
    for lay in &seq.layout {
        if lay.tokens_per_row != lay.matrix_cols.div_ceil(d_t) {
            return Err(TokenizerError::LayoutMismatch(format!("{}: tokens_per_row inconsistent", lay.name)));
        }
        let mut values = Vec::with_capacity(lay.matrix_rows * lay.matrix_cols);
        for row in 0..lay.matrix_rows {
            for col in 0..lay.matrix_cols {
                let n = lay.first_token_index + row * lay.tokens_per_row + col / d_t;
                values.push(seq.tokens[[n, col % d_t]]);
            }
        }
        records.push(TensorRecord::new(lay.name.clone(), lay.original_shape.clone(), lay.dtype, values)?);
    }
    let mut map = TensorMap::new(seq.source_id.clone(), records)?;
    *map.metadata_mut() = seq.metadata.clone();
    Ok(map)
}

/// Splits a sequence into consecutive non-overlapping windows; the last one
/// is padded with zero rows.
pub fn chunk_sequence(seq: &TokenSequence, window: usize) -> Result<Vec<TokenChunk>, TokenizerError> {
    if window == 0 {
        return Err(TokenizerError::ZeroWindow);
    }
    let n = seq.len();
    let mut chunks = Vec::with_capacity(n.div_ceil(window));
    for (chunk_index, start) in (0..n).step_by(window).enumerate() {
        let end = (start + window).min(n);
        let real = end - start;
        let mut tokens = Array2::zeros((window, seq.d_t));
        let mut mask = Array2::zeros((window, seq.d_t));
        tokens.slice_mut(s![..real, ..]).assign(&seq.tokens.slice(s![start..end, ..]));
        mask.slice_mut(s![..real, ..]).assign(&seq.mask.slice(s![start..end, ..]));
        let mut positions = seq.positions[start..end].to_vec();
        positions.resize(window, Position::default());
        chunks.push(TokenChunk {
            tokens,
            mask,
            positions,
            pad_rows: window - real,
            model_id: seq.source_id.clone(),
            chunk_index,
        });
    }
    Ok(chunks)
}

/// Concatenates the non-padding rows of consecutive chunks.
pub fn assemble_chunks(chunks: &[TokenChunk]) -> (Array2<f64>, Array2<f64>, Vec<Position>) {
    let d_t = chunks.first().map_or(0, TokenChunk::d_t);
    let total: usize = chunks.iter().map(TokenChunk::real_rows).sum();
    let mut tokens = Array2::zeros((total, d_t));
    let mut mask = Array2::zeros((total, d_t));
    let mut positions = Vec::with_capacity(total);
    let mut at = 0;
    for c in chunks {
        let r = c.real_rows();
        tokens.slice_mut(s![at..at + r, ..]).assign(&c.tokens.slice(s![..r, ..]));
        mask.slice_mut(s![at..at + r, ..]).assign(&c.mask.slice(s![..r, ..]));
        positions.extend_from_slice(&c.positions[..r]);
        at += r;
    }
    (tokens, mask, positions)
}

/// Adds Gaussian noise with standard deviation `sigma * s` to the unmasked
/// entries, where `s` is the standard deviation of the chunk's unmasked
/// values.
pub fn noise_view(chunk: &TokenChunk, sigma: f64, seed: u64) -> TokenChunk {
    let spread = unmasked_variance(chunk.tokens.iter().zip(chunk.mask.iter())).map_or(0.0, f64::sqrt);
    let amplitude = sigma * spread;
    if amplitude == 0.0 {
        return chunk.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = chunk.clone();
    for (v, &m) in out.tokens.iter_mut().zip(chunk.mask.iter()) {
        if m != 0.0 {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *v += amplitude * eps;
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct SequenceSidecar {
    d_t: usize,
    source_id: String,
    metadata: BTreeMap<String, String>,
    layout: Vec<LayerLayout>,
}

/// Stores a token sequence as a container (tokens, mask and positions under
/// reserved names) plus a JSON layout sidecar.
pub fn sequence_to_container(seq: &TokenSequence) -> Result<(TensorMap, String), TokenizerError> {
    let n = seq.len();
    let tokens = TensorRecord::new(TOKENS_KEY, vec![n, seq.d_t], Dtype::F64, seq.tokens.iter().copied().collect())?;
    let mask = TensorRecord::new(MASK_KEY, vec![n, seq.d_t], Dtype::F32, seq.mask.iter().copied().collect())?;
    let pos: Vec<f64> = seq.positions.iter().flat_map(|p| [p.n as f64, p.l as f64, p.k as f64]).collect();
    let positions = TensorRecord::new(POSITIONS_KEY, vec![n, 3], Dtype::F64, pos)?;
    let map = TensorMap::new(seq.source_id.clone(), vec![tokens, mask, positions])?;
    let sidecar = SequenceSidecar {
        d_t: seq.d_t,
        source_id: seq.source_id.clone(),
        metadata: seq.metadata.clone(),
        layout: seq.layout.clone(),
    };
    Ok((map, serde_json::to_string_pretty(&sidecar)?))
}

pub fn sequence_from_container(map: &TensorMap, sidecar: &str) -> Result<TokenSequence, TokenizerError> {
    let side: SequenceSidecar = serde_json::from_str(sidecar)?;
    let get = |key: &str| {
        map.get(key).ok_or_else(|| TokenizerError::LayoutMismatch(format!("missing {key}")))
    };
    let (tokens, mask, pos) = (get(TOKENS_KEY)?, get(MASK_KEY)?, get(POSITIONS_KEY)?);
    let n = tokens.shape().first().copied().unwrap_or(0);
    let as_matrix = |r: &TensorRecord, cols: usize| {
        Array2::from_shape_vec((n, cols), r.values().to_vec())
            .map_err(|_| TokenizerError::LayoutMismatch(format!("{} has shape {:?}", r.name(), r.shape())))
    };
    let positions = as_matrix(pos, 3)?
        .rows()
        .into_iter()
        .map(|r| Position { n: r[0] as usize, l: r[1] as usize, k: r[2] as usize })
        .collect();
    let seq = TokenSequence {
        tokens: as_matrix(tokens, side.d_t)?,
        mask: as_matrix(mask, side.d_t)?,
        positions,
        layout: side.layout,
        d_t: side.d_t,
        source_id: side.source_id,
        metadata: side.metadata,
    };
    let expected: usize = seq.layout.iter().map(LayerLayout::token_count).sum();
    if expected != n {
        return Err(TokenizerError::LayoutMismatch(format!("sidecar implies {expected} tokens, found {n}")));
    }
    Ok(seq)
}
