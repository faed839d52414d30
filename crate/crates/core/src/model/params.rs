//! Flat parameter storage with named, shaped slots.

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Dtype, TensorMap, TensorRecord};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub d_t: usize,
    pub latent_dim: usize,
    pub proj_dim: usize,
    pub num_layers_enc: usize,
    pub num_layers_dec: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub window: usize,
    /// Largest layer index with its own embedding row; larger indices share it.
    pub max_layer_index: usize,
    /// Largest within-layer index with its own embedding row.
    pub max_k_index: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            d_t: crate::tokenizer::DEFAULT_TOKEN_DIM,
            latent_dim: 32,
            proj_dim: 16,
            num_layers_enc: 2,
            num_layers_dec: 2,
            num_heads: 4,
            ff_dim: 64,
            window: 16,
            max_layer_index: 31,
            max_k_index: 255,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("d_t", self.d_t),
            ("latent_dim", self.latent_dim),
            ("proj_dim", self.proj_dim),
            ("num_layers_enc", self.num_layers_enc),
            ("num_layers_dec", self.num_layers_dec),
            ("num_heads", self.num_heads),
            ("ff_dim", self.ff_dim),
            ("window", self.window),
            ("max_layer_index", self.max_layer_index),
            ("max_k_index", self.max_k_index),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.latent_dim.is_multiple_of(self.num_heads) {
            return Err(ModelError::InvalidConfig("latent_dim must be divisible by num_heads".into()));
        }
        if self.proj_dim > self.latent_dim {
            return Err(ModelError::InvalidConfig("proj_dim must not exceed latent_dim".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.latent_dim / self.num_heads
    }
}

/// A contiguous `rows x cols` region of the flat parameter vector. Vectors
/// (biases, norm parameters) are single-row slots persisted as rank 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub vector: bool,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn view<'a>(&self, flat: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &flat[self.range()]).expect("slot in bounds")
    }

    pub fn view_mut<'a>(&self, flat: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut flat[self.range()]).expect("slot in bounds")
    }

    fn shape(&self) -> Vec<usize> {
        if self.vector {
            vec![self.cols]
        } else {
            vec![self.rows, self.cols]
        }
    }
}

/// `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, Copy)]
pub struct LinearSlots {
    pub weight: Slot,
    pub bias: Slot,
}

#[derive(Debug, Clone, Copy)]
pub struct NormSlots {
    pub gain: Slot,
    pub bias: Slot,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionSlots {
    pub query: LinearSlots,
    pub key: LinearSlots,
    pub value: LinearSlots,
    pub out: LinearSlots,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockSlots {
    pub norm_attn: NormSlots,
    pub attn: AttentionSlots,
    pub norm_ff: NormSlots,
    pub ff_in: LinearSlots,
    pub ff_out: LinearSlots,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Location of every parameter group of the autoencoder.
#[derive(Debug, Clone)]
pub struct ModelIndex {
    pub input: LinearSlots,
    pub pos_n: Slot,
    pub pos_l: Slot,
    pub pos_k: Slot,
    pub encoder: Vec<BlockSlots>,
    pub encoder_norm: NormSlots,
    pub decoder: Vec<BlockSlots>,
    pub decoder_norm: NormSlots,
    pub output: LinearSlots,
    pub proj_hidden: LinearSlots,
    pub proj_out: LinearSlots,
    named: Vec<(String, Slot, Init)>,
    total: usize,
}

struct Allocator {
    named: Vec<(String, Slot, Init)>,
    total: usize,
}

impl Allocator {
    fn slot(&mut self, name: String, rows: usize, cols: usize, vector: bool, init: Init) -> Slot {
        let slot = Slot { offset: self.total, rows, cols, vector };
        self.total += slot.len();
        self.named.push((name, slot, init));
        slot
    }

    fn matrix(&mut self, name: String, rows: usize, cols: usize, std: f64) -> Slot {
        self.slot(name, rows, cols, false, Init::Normal(std))
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, std: f64) -> LinearSlots {
        LinearSlots {
            weight: self.matrix(format!("{prefix}.weight"), fan_in, fan_out, std),
            bias: self.slot(format!("{prefix}.bias"), 1, fan_out, true, Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> NormSlots {
        NormSlots {
            gain: self.slot(format!("{prefix}.gain"), 1, dim, true, Init::Ones),
            bias: self.slot(format!("{prefix}.bias"), 1, dim, true, Init::Zeros),
        }
    }

    fn block(&mut self, prefix: &str, cfg: &AutoencoderConfig, residual_std: f64) -> BlockSlots {
        let d = cfg.latent_dim;
        BlockSlots {
            norm_attn: self.norm(&format!("{prefix}.norm_attn"), d),
            attn: AttentionSlots {
                query: self.linear(&format!("{prefix}.attn.query"), d, d, 0.02),
                key: self.linear(&format!("{prefix}.attn.key"), d, d, 0.02),
                value: self.linear(&format!("{prefix}.attn.value"), d, d, 0.02),
                out: self.linear(&format!("{prefix}.attn.out"), d, d, residual_std),
            },
            norm_ff: self.norm(&format!("{prefix}.norm_ff"), d),
            ff_in: self.linear(&format!("{prefix}.ff_in"), d, cfg.ff_dim, 0.02),
            ff_out: self.linear(&format!("{prefix}.ff_out"), cfg.ff_dim, d, residual_std),
        }
    }
}

impl ModelIndex {
    pub fn new(cfg: &AutoencoderConfig) -> Self {
        let d = cfg.latent_dim;
        let mut a = Allocator { named: Vec::new(), total: 0 };
        let input = a.linear("encoder.input", cfg.d_t, d, 1.0 / (cfg.d_t as f64).sqrt());
        let pos_n = a.matrix("position.n".into(), cfg.window, d, 0.02);
        let pos_l = a.matrix("position.l".into(), cfg.max_layer_index + 1, d, 0.02);
        let pos_k = a.matrix("position.k".into(), cfg.max_k_index + 1, d, 0.02);
        let enc_std = 0.02 / (2.0 * cfg.num_layers_enc as f64).sqrt();
        let encoder = (0..cfg.num_layers_enc).map(|i| a.block(&format!("encoder.block{i}"), cfg, enc_std)).collect();
        let encoder_norm = a.norm("encoder.norm", d);
        let dec_std = 0.02 / (2.0 * cfg.num_layers_dec as f64).sqrt();
        let decoder = (0..cfg.num_layers_dec).map(|i| a.block(&format!("decoder.block{i}"), cfg, dec_std)).collect();
        let decoder_norm = a.norm("decoder.norm", d);
        let output = a.linear("decoder.output", d, cfg.d_t, 1.0 / (d as f64).sqrt());
        let proj_hidden = a.linear("projection.hidden", d, d, 1.0 / (d as f64).sqrt());
        let proj_out = a.linear("projection.out", d, cfg.proj_dim, 1.0 / (d as f64).sqrt());
        Self {
            input,
            pos_n,
            pos_l,
            pos_k,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            output,
            proj_hidden,
            proj_out,
            named: a.named,
            total: a.total,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.total
    }

    pub fn named_slots(&self) -> impl Iterator<Item = (&str, Slot)> {
        self.named.iter().map(|(n, s, _)| (n.as_str(), *s))
    }

    pub fn slot(&self, name: &str) -> Option<Slot> {
        self.named.iter().find(|(n, _, _)| n == name).map(|(_, s, _)| *s)
    }
}

/// Parameters of the encoder, decoder and projection head with a flat view
/// for the optimizer.
#[derive(Debug, Clone)]
pub struct AutoencoderWeights {
    config: AutoencoderConfig,
    index: ModelIndex,
    params: Vec<f64>,
}

impl PartialEq for AutoencoderWeights {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl AutoencoderWeights {
    pub fn init(config: AutoencoderConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let index = ModelIndex::new(&config);
        let mut params = vec![0.0; index.parameter_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, slot, init) in &index.named {
            let region = &mut params[slot.range()];
            match *init {
                Init::Zeros => {}
                Init::Ones => region.fill(1.0),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("finite std");
                    region.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
                }
            }
        }
        Ok(Self { config, index, params })
    }

    pub fn zeros(config: AutoencoderConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let index = ModelIndex::new(&config);
        let params = vec![0.0; index.parameter_count()];
        Ok(Self { config, index, params })
    }

    pub fn from_flat(config: AutoencoderConfig, params: Vec<f64>) -> Result<Self, ModelError> {
        config.validate()?;
        let index = ModelIndex::new(&config);
        if params.len() != index.parameter_count() {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                index.parameter_count(),
                params.len()
            )));
        }
        Ok(Self { config, index, params })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn index(&self) -> &ModelIndex {
        &self.index
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Named tensors (stored as f64 so training can resume bit-exactly).
    pub fn to_tensor_map(&self, source_id: &str) -> TensorMap {
        let records = self
            .index
            .named_slots()
            .map(|(name, slot)| {
                TensorRecord::new(name, slot.shape(), Dtype::F64, self.params[slot.range()].to_vec())
                    .expect("slot shapes are consistent")
            })
            .collect();
        TensorMap::new(source_id, records).expect("parameter names are unique")
    }

    pub fn from_tensor_map(config: AutoencoderConfig, map: &TensorMap) -> Result<Self, ModelError> {
        let mut weights = Self::zeros(config)?;
        let named: Vec<(String, Slot)> = weights.index.named_slots().map(|(n, s)| (n.to_string(), s)).collect();
        if map.len() != named.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "checkpoint has {} tensors, config implies {}",
                map.len(),
                named.len()
            )));
        }
        for (name, slot) in named {
            let record = map
                .get(&name)
                .ok_or_else(|| ModelError::ShapeMismatch(format!("missing tensor {name}")))?;
            if record.shape() != slot.shape().as_slice() {
                return Err(ModelError::ShapeMismatch(format!(
                    "{name}: expected {:?}, found {:?}",
                    slot.shape(),
                    record.shape()
                )));
            }
            weights.params[slot.range()].copy_from_slice(record.values());
        }
        if !weights.all_finite() {
            return Err(ModelError::NonFinite("loaded weights".into()));
        }
        Ok(weights)
    }

    /// Writes `<stem>.safetensors` and the `<stem>.json` config sidecar.
    pub fn save(&self, stem: &std::path::Path) -> Result<(), ModelError> {
        let map = self.to_tensor_map("autoencoder");
        crate::checkpoint::write_checkpoint_file(&stem.with_extension("safetensors"), &map)?;
        let json = serde_json::to_string_pretty(&self.config).expect("config serializes");
        std::fs::write(stem.with_extension("json"), json)
            .map_err(|e| ModelError::Io(stem.with_extension("json").display().to_string(), e))
    }

    /// Loads from the container path; the config sidecar sits next to it with
    /// a `.json` extension.
    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let sidecar = path.with_extension("json");
        let text = std::fs::read_to_string(&sidecar).map_err(|e| ModelError::Io(sidecar.display().to_string(), e))?;
        let config: AutoencoderConfig =
            serde_json::from_str(&text).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        let map = crate::checkpoint::read_checkpoint_file(&path.with_extension("safetensors"))?;
        Self::from_tensor_map(config, &map)
    }
}
