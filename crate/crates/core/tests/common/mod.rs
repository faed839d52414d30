#![allow(dead_code)]

pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wf_core::checkpoint::{Dtype, TensorMap, TensorRecord};
use wf_core::model::{AutoencoderConfig, AutoencoderWeights, ChunkPair};
use wf_core::tokenizer::{chunk_sequence, noise_view, tokenize_model};

pub fn tiny_config(heads: usize) -> AutoencoderConfig {
    AutoencoderConfig {
        d_t: 4,
        latent_dim: 8,
        proj_dim: 4,
        num_layers_enc: 1,
        num_layers_dec: 1,
        num_heads: heads,
        ff_dim: 12,
        window: 4,
        max_layer_index: 3,
        max_k_index: 5,
    }
}

/// Initialized weights with every parameter jittered so that norm gains,
/// biases and embeddings are all non-trivial.
pub fn jittered_weights(cfg: AutoencoderConfig, seed: u64, scale: f64) -> AutoencoderWeights {
    let mut w = AutoencoderWeights::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let noise = Normal::new(0.0, scale).unwrap();
    for v in w.params_mut() {
        *v += noise.sample(&mut rng);
    }
    w
}

/// Random map with 1..=max_layers tensors of rank 0..=4 and small dims.
pub fn random_map(rng: &mut impl Rng, max_layers: usize, max_dim: usize, dtype: Option<Dtype>) -> TensorMap {
    let layers = rng.random_range(1..=max_layers);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let records = (0..layers)
        .map(|i| {
            let rank = rng.random_range(0..=4);
            let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=max_dim)).collect();
            let n: usize = shape.iter().product();
            let values = (0..n).map(|_| normal.sample(rng)).collect();
            let dtype = dtype.unwrap_or(if rng.random_bool(0.5) { Dtype::F32 } else { Dtype::F64 });
            TensorRecord::new(format!("layer{i:02}.p{}", rng.random_range(0..100)), shape, dtype, values).unwrap()
        })
        .collect();
    TensorMap::new(format!("model{}", rng.random_range(0..1000)), records).unwrap()
}

/// Chunk pairs (clean, noised) drawn from a few random models.
pub fn random_pairs(cfg: &AutoencoderConfig, seed: u64, count: usize) -> Vec<ChunkPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    while pairs.len() < count {
        let map = random_map(&mut rng, 4, 5, Some(Dtype::F64));
        let seq = tokenize_model(&map, cfg.d_t).unwrap();
        let norm = seq.norm_scale();
        for chunk in chunk_sequence(&seq, cfg.window).unwrap() {
            if pairs.len() == count {
                break;
            }
            let noised = noise_view(&chunk, 0.1, rng.random());
            pairs.push(ChunkPair { clean: chunk, noised, norm });
        }
    }
    pairs
}

/// Largest relative error between the analytic gradient and central
/// differences over every parameter: `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    w: &AutoencoderWeights,
    pairs: &[ChunkPair],
    obj: &wf_core::model::ObjectiveWeights,
    h: f64,
    floor: f64,
) -> (f64, usize) {
    let analytic = wf_core::model::backward(pairs, w, obj).unwrap().grad;
    let mut worst = (0.0, 0);
    let mut probe = w.clone();
    for i in 0..w.len() {
        let base = w.params()[i];
        probe.params_mut()[i] = base + h;
        let up = wf_core::model::batch_loss(pairs, &probe, obj).unwrap().total;
        probe.params_mut()[i] = base - h;
        let down = wf_core::model::batch_loss(pairs, &probe, obj).unwrap().total;
        probe.params_mut()[i] = base;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(floor);
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    worst
}
