mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wf_core::checkpoint::{read_checkpoint_file, Dtype, TensorMap, TensorRecord};
use wf_core::generation::{
    autoencode, embed_prompt, fit_kde, generate, rank_candidates, sample_latents, save_candidate, Bandwidth,
    CandidateModel, GenerateConfig, GenerationError, ProbeEvaluator,
};
use wf_core::model::AutoencoderWeights;
use wf_core::tokenizer::tokenize_model;

fn prompt(seed: u64) -> TensorMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = common::random_map(&mut rng, 4, 5, None);
    map.set_source_id(format!("prompt{seed}"));
    map
}

fn weights() -> AutoencoderWeights {
    common::jittered_weights(common::tiny_config(2), 3, 0.05)
}

fn bits(map: &TensorMap) -> Vec<u64> {
    map.flat_values().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn embedding_chunks_and_oracle() {
    let w = weights();
    let cfg = *w.config();
    for seed in 0..5 {
        let p = prompt(seed);
        let emb = embed_prompt(&p, &w).unwrap();
        let seq = tokenize_model(&p, cfg.d_t).unwrap();
        assert_eq!(emb.chunks.len(), seq.len().div_ceil(cfg.window));
        assert_eq!(emb, embed_prompt(&p, &w).unwrap());

        let map = w.to_tensor_map("oracle");
        let inv = 1.0 / seq.norm_scale().sqrt();
        for (ci, chunk) in emb.chunks.iter().enumerate() {
            let valid = chunk.row_valid();
            let tokens: Vec<Vec<f64>> = (0..cfg.window)
                .map(|r| {
                    let at = ci * cfg.window + r;
                    (0..cfg.d_t).map(|j| if at < seq.len() { seq.tokens[[at, j]] * inv } else { 0.0 }).collect()
                })
                .collect();
            let expected = common::oracle::encode(&map, &cfg, &tokens, &chunk.positions, &valid);
            for (r, row) in expected.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    assert!((chunk.latents[[r, j]] - v).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn zero_bandwidth_reproduces_autoencoder() {
    let w = weights();
    let p = prompt(7);
    let reference = autoencode(&p, &w).unwrap();
    let cands = generate(&p, &w, &GenerateConfig { count: 4, base_seed: 10, bandwidth: Bandwidth::Fixed(0.0) }).unwrap();
    assert_eq!(cands.len(), 4);
    for c in &cands {
        assert_eq!(c.weights.shape_list(), p.shape_list());
        assert_eq!(bits(&c.weights), bits(&reference));
    }
}

#[test]
fn candidates_distinct_and_reproducible() {
    let w = weights();
    let p = prompt(8);
    let cfg = GenerateConfig { count: 10, base_seed: 100, bandwidth: Bandwidth::Fixed(0.5) };
    let a = generate(&p, &w, &cfg).unwrap();
    let b = generate(&p, &w, &cfg).unwrap();
    assert_eq!(a, b);
    let seeds: Vec<u64> = a.iter().map(|c| c.seed).collect();
    assert_eq!(seeds, (100..110).collect::<Vec<_>>());
    for c in &a {
        assert_eq!(c.weights.shape_list(), p.shape_list());
    }
    assert_ne!(bits(&a[0].weights), bits(&a[1].weights));
    assert!(matches!(generate(&p, &w, &GenerateConfig { count: 0, ..cfg }), Err(GenerationError::InvalidArgument(_))));
}

#[test]
fn sampling_spread_matches_bandwidth() {
    let w = weights();
    let emb = embed_prompt(&prompt(9), &w).unwrap();
    let h = 0.3;
    let kde = fit_kde(&emb, Bandwidth::Fixed(h)).unwrap();
    let dim = kde.dim;
    let (mut sum, mut sq) = (vec![0.0; dim], vec![0.0; dim]);
    for seed in 0..10_000u64 {
        let s = sample_latents(&kde, &emb, seed);
        for (orig, new) in emb.chunks.iter().zip(&s.chunks) {
            let valid = orig.row_valid();
            for r in 0..valid.len() {
                if !valid[r] {
                    assert_eq!(orig.latents.row(r), new.latents.row(r));
                    continue;
                }
                if r == 0 {
                    for j in 0..dim {
                        let d = new.latents[[r, j]] - orig.latents[[r, j]];
                        sum[j] += d;
                        sq[j] += d * d;
                    }
                }
            }
        }
    }
    let draws = 10_000.0 * emb.chunks.iter().filter(|c| c.row_valid()[0]).count() as f64;
    for j in 0..dim {
        let mean = sum[j] / draws;
        let std = (sq[j] / draws - mean * mean).sqrt();
        assert!((std / h - 1.0).abs() < 0.05, "dim {j}: {std}");
    }
}

#[test]
fn scott_rule_is_positive_for_spread_latents() {
    let w = weights();
    let emb = embed_prompt(&prompt(10), &w).unwrap();
    let kde = fit_kde(&emb, Bandwidth::Scott).unwrap();
    assert_eq!(kde.centers.nrows(), emb.latent_count());
    assert!(kde.bandwidth > 0.0);
}

#[test]
fn single_latent_scott_is_degenerate() {
    let w = weights();
    let p = TensorMap::new("single", vec![TensorRecord::new("b", vec![2], Dtype::F64, vec![1.0, 2.0]).unwrap()]).unwrap();
    let emb = embed_prompt(&p, &w).unwrap();
    assert_eq!(emb.latent_count(), 1);
    let kde = fit_kde(&emb, Bandwidth::Scott).unwrap();
    assert_eq!(kde.bandwidth, 0.0);
    assert_eq!(sample_latents(&kde, &emb, 5), emb);
}

struct FixedScores(Vec<(u64, f64)>);

impl ProbeEvaluator for FixedScores {
    fn probe_len(&self) -> usize {
        self.0.len()
    }

    fn score(&self, weights: &TensorMap) -> Result<f64, GenerationError> {
        let seed: u64 = weights.metadata()["seed"].parse().unwrap();
        Ok(self.0.iter().find(|(s, _)| *s == seed).unwrap().1)
    }
}

fn candidates(seeds: &[u64]) -> Vec<CandidateModel> {
    seeds
        .iter()
        .map(|&seed| {
            let mut weights = prompt(1);
            weights.metadata_mut().insert("seed".into(), seed.to_string());
            CandidateModel { weights, prompt_id: "p".into(), seed, probe_score: None, rank: None }
        })
        .collect()
}

#[test]
fn ranking_semantics() {
    let probe = FixedScores(vec![(0, 0.9), (1, 0.2), (2, 0.5)]);
    let top = rank_candidates(candidates(&[0, 1, 2]), &probe, 2).unwrap();
    assert_eq!(top.iter().map(|c| c.seed).collect::<Vec<_>>(), vec![1, 2]);
    assert_eq!(top.iter().map(|c| c.rank).collect::<Vec<_>>(), vec![Some(1), Some(2)]);
    assert_eq!(top[0].weights.metadata()["probe_score"].parse::<f64>().unwrap(), 0.2);

    let all = rank_candidates(candidates(&[0, 1, 2]), &probe, 3).unwrap();
    assert_eq!(all.iter().map(|c| c.seed).collect::<Vec<_>>(), vec![1, 2, 0]);

    let ties = FixedScores(vec![(5, 0.3), (3, 0.3), (4, 0.1)]);
    let top = rank_candidates(candidates(&[5, 3, 4]), &ties, 3).unwrap();
    assert_eq!(top.iter().map(|c| c.seed).collect::<Vec<_>>(), vec![4, 3, 5]);

    assert!(matches!(rank_candidates(candidates(&[0]), &FixedScores(vec![]), 1), Err(GenerationError::EmptyProbe)));
    assert!(rank_candidates(candidates(&[0]), &probe, 2).is_err());
}

#[test]
fn candidate_files() {
    let w = weights();
    let p = prompt(11);
    let dir = tempfile::tempdir().unwrap();
    let cands = generate(&p, &w, &GenerateConfig { count: 2, base_seed: 4, bandwidth: Bandwidth::Scott }).unwrap();
    let path = save_candidate(dir.path(), &cands[1]).unwrap();
    assert_eq!(path.file_name().unwrap(), "prompt11.gen5.safetensors");
    let back = read_checkpoint_file(&path).unwrap();
    assert_eq!(back.metadata()["prompt_id"], "prompt11");
    assert_eq!(back.metadata()["seed"], "5");
    assert_eq!(bits(&back), bits(&cands[1].weights));
}
