//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{gradient_check, jittered_weights, oracle, random_map, random_pairs, tiny_config};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wf_core::checkpoint::{parse_checkpoint, write_checkpoint, Dtype, TensorMap, TensorRecord};
use wf_core::generation::{autoencode, generate, rank_candidates, save_candidate, Bandwidth, GenerateConfig};
use wf_core::model::{
    backward, ntxent_loss, recon_loss, AutoencoderConfig, AutoencoderWeights, ChunkPair, ObjectiveWeights,
    ProjectedEmbedding,
};
use wf_core::pipeline::{collect_dir, read_token_files, write_token_files};
use wf_core::tokenizer::{detokenize, noise_view, tokenize_model, TokenSequence};
use wf_core::training::{adamw_step, train, train_step, AdamHyper, OptimizerState, TrainingConfig};
use wf_core::zoo_bench::{
    build_zoo, dare_merge, magnitude_prune, run_comparison, ComparisonConfig, Condition, FinetuneConfig, TaskProbe,
    Zoo, ZooSpec,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn same_bits(a: &TensorMap, b: &TensorMap) -> bool {
    a.len() == b.len()
        && a.records().iter().zip(b.records()).all(|(x, y)| {
            x.name() == y.name()
                && x.shape() == y.shape()
                && x.dtype() == y.dtype()
                && x.values().iter().zip(y.values()).all(|(u, v)| u.to_bits() == v.to_bits())
        })
}

fn tokenization_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut cases = 0;
    for arch in 0..100 {
        let mut map = random_map(&mut rng, 8, 9, None);
        map.metadata_mut().insert("arch".into(), arch.to_string());
        for d_t in [1, 7, 16, 64, 230] {
            let seq = tokenize_model(&map, d_t).map_err(|e| e.to_string())?;
            let back = detokenize(&seq).map_err(|e| e.to_string())?;
            check(same_bits(&map, &back) && back.source_id() == map.source_id(), || {
                format!("architecture {arch} at d_t {d_t} does not round-trip")
            })?;
            cases += 1;
        }
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{cases} cases bitwise in {:.2}s", elapsed.as_secs_f64()))
}

fn container_round_trip_and_fuzz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for i in 0..500 {
        let mut map = random_map(&mut rng, 6, 7, None);
        map.metadata_mut().insert(format!("k{i}"), "v".repeat(i % 5));
        let back = parse_checkpoint(&write_checkpoint(&map)).map_err(|e| e.to_string())?;
        check(same_bits(&map, &back) && back.metadata() == map.metadata(), || format!("map {i} changed"))?;
    }

    let valid: Vec<Vec<u8>> = (0..20).map(|_| write_checkpoint(&random_map(&mut rng, 4, 5, None))).collect();
    let (mut panics, mut rejected) = (0, 0);
    for i in 0..10_000 {
        let bytes: Vec<u8> = match i % 4 {
            // Pure noise.
            0 => (0..rng.random_range(0..300)).map(|_| rng.random()).collect(),
            // Plausible header length followed by noise.
            1 => {
                let len = rng.random_range(0..200u64);
                let mut b = len.to_le_bytes().to_vec();
                b.extend((0..rng.random_range(0..300)).map(|_| rng.random::<u8>()));
                b
            }
            // Valid file with random byte flips.
            2 => {
                let mut b = valid[i % valid.len()].clone();
                for _ in 0..rng.random_range(1..8) {
                    let at = rng.random_range(0..b.len());
                    b[at] = rng.random();
                }
                b
            }
            // Valid file truncated.
            _ => {
                let b = &valid[i % valid.len()];
                b[..rng.random_range(0..b.len())].to_vec()
            }
        };
        match catch_unwind(AssertUnwindSafe(|| parse_checkpoint(&bytes))) {
            Err(_) => panics += 1,
            Ok(Err(_)) => rejected += 1,
            Ok(Ok(_)) => {}
        }
    }
    check(panics == 0, || format!("{panics} of 10000 fuzz inputs panicked"))?;
    Ok(format!("500 maps bitwise, 10000 fuzz inputs without panic ({rejected} rejected)"))
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst: f64 = 0.0;
    for case in 0..150 {
        let (rows, cols) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let mat = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..rows).map(|_| (0..cols).map(|_| normal.sample(rng)).collect()).collect()
        };
        let (target, recon) = (mat(&mut rng), mat(&mut rng));
        let mut mask: Vec<Vec<f64>> =
            (0..rows).map(|_| (0..cols).map(|_| f64::from(u8::from(rng.random_bool(0.7)))).collect()).collect();
        mask[0][0] = 1.0;
        let norm = rng.random_range(0.01..10.0);
        let arr = |m: &Vec<Vec<f64>>| Array2::from_shape_fn((rows, cols), |(i, j)| m[i][j]);
        let got = recon_loss(&arr(&target).view(), &arr(&recon).view(), &arr(&mask).view(), norm)
            .map_err(|e| e.to_string())?;
        let want = oracle::recon(&target, &recon, &mask, norm);
        worst = worst.max((got - want).abs());
        check((got - want).abs() <= 1e-10, || format!("recon case {case}: {got} vs {want}"))?;

        let b = rng.random_range(2..=8);
        let dim = rng.random_range(2..=6);
        let temperature = rng.random_range(0.05..2.0);
        let views: Vec<(Vec<f64>, Vec<f64>)> = (0..b)
            .map(|_| {
                let a = unit((0..dim).map(|_| normal.sample(&mut rng)).collect());
                let c = unit((0..dim).map(|_| normal.sample(&mut rng)).collect());
                (a, c)
            })
            .collect();
        let pairs: Vec<(ProjectedEmbedding, ProjectedEmbedding)> = views
            .iter()
            .map(|(a, c)| (ProjectedEmbedding(Array1::from(a.clone())), ProjectedEmbedding(Array1::from(c.clone()))))
            .collect();
        let got = ntxent_loss(&pairs, temperature).map_err(|e| e.to_string())?;
        let (vi, vj): (Vec<_>, Vec<_>) = views.into_iter().unzip();
        let want = oracle::ntxent(&vi, &vj, temperature);
        worst = worst.max((got - want).abs());
        check((got - want).abs() <= 1e-10, || format!("ntxent case {case} (B={b}): {got} vs {want}"))?;
    }

    // Identical positives, mutually orthogonal pairs: every anchor sees one
    // similarity of 1 and 2B - 2 similarities of 0.
    for b in 2..=8 {
        for temperature in [1.0, 0.5, 0.1] {
            let e = |i: usize| {
                let mut v = Array1::zeros(8);
                v[i] = 1.0;
                ProjectedEmbedding(v)
            };
            let pairs: Vec<_> = (0..b).map(|i| (e(i), e(i))).collect();
            let got = ntxent_loss(&pairs, temperature).map_err(|e| e.to_string())?;
            let pos = (1.0 / temperature).exp();
            let want = -(pos / (pos + 2.0 * (b as f64 - 1.0))).ln();
            worst = worst.max((got - want).abs());
            check((got - want).abs() <= 1e-10, || format!("orthogonal B={b} tau={temperature}: {got} vs {want}"))?;
        }
    }
    let e = 1f64.exp();
    let two = ntxent_loss(
        &[
            (ProjectedEmbedding(Array1::from(vec![1.0, 0.0])), ProjectedEmbedding(Array1::from(vec![1.0, 0.0]))),
            (ProjectedEmbedding(Array1::from(vec![0.0, 1.0])), ProjectedEmbedding(Array1::from(vec![0.0, 1.0]))),
        ],
        1.0,
    )
    .map_err(|e| e.to_string())?;
    check((two + (e / (e + 2.0)).ln()).abs() <= 1e-10, || format!("B=2 closed form: {two}"))?;
    Ok(format!("300 random cases + 22 orthogonal cases, max abs error {worst:.1e}"))
}

fn gradient_check_criterion() -> Outcome {
    let start = Instant::now();
    let cfg = tiny_config(2);
    let w = jittered_weights(cfg, 21, 0.1);
    let pairs = random_pairs(&cfg, 77, 3);
    let mut worst: f64 = 0.0;
    for gamma in [0.0, 0.5, 1.0] {
        let obj = ObjectiveWeights { gamma, temperature: 0.5 };
        let (err, at) = gradient_check(&w, &pairs, &obj, 1e-5, 1e-6);
        check(err < 1e-4, || format!("gamma {gamma}: relative error {err:.2e} at parameter {at}"))?;
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!("{} parameters, max relative error {worst:.2e} in {:.1}s", w.len(), elapsed.as_secs_f64()))
}

/// Slots that only the named branch can reach.
fn branch_slots(w: &AutoencoderWeights, prefix: &str) -> Vec<std::ops::Range<usize>> {
    w.index().named_slots().filter(|(n, _)| n.starts_with(prefix)).map(|(_, s)| s.range()).collect()
}

fn step(w: &AutoencoderWeights, pairs: &[ChunkPair], gamma: f64) -> Result<(Vec<f64>, f64), String> {
    let (lr, wd) = (1e-3, 1e-2);
    let mut out = w.clone();
    let mut state = OptimizerState::new(w.len());
    let obj = ObjectiveWeights { gamma, temperature: 0.2 };
    let loss = train_step(&mut out, &mut state, pairs, &obj, lr, wd).map_err(|e| e.to_string())?;
    Ok((out.params().to_vec(), loss))
}

fn same_slice(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn objective_endpoints() -> Outcome {
    let (lr, wd) = (1e-3, 1e-2);
    let cfg = tiny_config(2);
    let w = jittered_weights(cfg, 5, 0.1);
    let pairs = random_pairs(&cfg, 13, 4);
    let map = w.to_tensor_map("ae");
    let decay_only = |x: f64| x * (1.0 - lr * wd);

    // Reference updates: AdamW on the gradient of one loss term alone.
    let pure = |gamma: f64| -> Result<Vec<f64>, String> {
        let g = backward(&pairs, &w, &ObjectiveWeights { gamma, temperature: 0.2 }).map_err(|e| e.to_string())?;
        let mut p = w.params().to_vec();
        adamw_step(&mut p, &g.grad, &mut OptimizerState::new(w.len()), lr, wd, AdamHyper::default())
            .map_err(|e| e.to_string())?;
        Ok(p)
    };

    // gamma = 0: the loss is the oracle reconstruction loss, the noised views
    // and the projection head are irrelevant, and the head only decays.
    let (rec, rec_loss) = step(&w, &pairs, 0.0)?;
    check(same_slice(&rec, &pure(0.0)?), || "gamma=0 step differs from the reconstruction step".into())?;
    let mut oracle_rec = 0.0;
    for p in &pairs {
        let valid = p.clean.row_valid();
        let rows = |a: &Array2<f64>| a.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
        let scaled = p.clean.scaled(1.0 / p.norm.sqrt());
        let z = oracle::encode(&map, &cfg, &rows(&scaled.tokens), &p.clean.positions, &valid);
        let out: Vec<Vec<f64>> = oracle::decode(&map, &cfg, &z, &p.clean.positions, &valid)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v * p.norm.sqrt()).collect())
            .collect();
        oracle_rec += oracle::recon(&rows(&p.clean.tokens), &out, &rows(&p.clean.mask), p.norm);
    }
    oracle_rec /= pairs.len() as f64;
    check((rec_loss - oracle_rec).abs() < 1e-10, || format!("gamma=0 loss {rec_loss} vs oracle {oracle_rec}"))?;
    let mut altered = w.clone();
    for r in branch_slots(&w, "projection") {
        altered.params_mut()[r].iter_mut().for_each(|v| *v = -3.0 * *v + 0.7);
    }
    let other: Vec<ChunkPair> =
        pairs.iter().map(|p| ChunkPair { noised: noise_view(&p.clean, 2.0, 999), ..p.clone() }).collect();
    let (rec_alt, _) = step(&altered, &other, 0.0)?;
    let head = branch_slots(&w, "projection");
    for i in 0..w.len() {
        if head.iter().any(|r| r.contains(&i)) {
            check(rec[i].to_bits() == decay_only(w.params()[i]).to_bits(), || format!("head parameter {i} moved"))?;
        } else {
            check(rec[i].to_bits() == rec_alt[i].to_bits(), || format!("gamma=0 parameter {i} saw the contrastive branch"))?;
        }
    }

    // gamma = 1: the loss is the oracle NT-Xent, the decoder is irrelevant
    // and only decays.
    let (con, con_loss) = step(&w, &pairs, 1.0)?;
    check(same_slice(&con, &pure(1.0)?), || "gamma=1 step differs from the contrastive step".into())?;
    let (mut vi, mut vj) = (Vec::new(), Vec::new());
    for p in &pairs {
        for (chunk, out) in [(&p.clean, &mut vi), (&p.noised, &mut vj)] {
            let valid = chunk.row_valid();
            let scaled = chunk.scaled(1.0 / p.norm.sqrt());
            let rows: Vec<Vec<f64>> = scaled.tokens.rows().into_iter().map(|r| r.to_vec()).collect();
            let z = oracle::encode(&map, &cfg, &rows, &chunk.positions, &valid);
            out.push(oracle::project(&map, &cfg, &z, &valid));
        }
    }
    let oracle_con = oracle::ntxent(&vi, &vj, 0.2);
    check((con_loss - oracle_con).abs() < 1e-10, || format!("gamma=1 loss {con_loss} vs oracle {oracle_con}"))?;
    let mut altered = w.clone();
    for r in branch_slots(&w, "decoder") {
        altered.params_mut()[r].iter_mut().for_each(|v| *v = -3.0 * *v + 0.7);
    }
    let (con_alt, _) = step(&altered, &pairs, 1.0)?;
    let dec = branch_slots(&w, "decoder");
    for i in 0..w.len() {
        if dec.iter().any(|r| r.contains(&i)) {
            check(con[i].to_bits() == decay_only(w.params()[i]).to_bits(), || format!("decoder parameter {i} moved"))?;
        } else {
            check(con[i].to_bits() == con_alt[i].to_bits(), || format!("gamma=1 parameter {i} saw the decoder"))?;
        }
    }
    Ok(format!("both endpoints bitwise over {} parameters, losses match oracles", w.len()))
}

fn zero_bandwidth_generation() -> Outcome {
    let cfg = AutoencoderConfig { max_layer_index: 7, max_k_index: 255, ..tiny_config(2) };
    let w = jittered_weights(cfg, 8, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut total = 0;
    for p in 0..10 {
        let prompt = random_map(&mut rng, 5, 4, None);
        let reference = autoencode(&prompt, &w).map_err(|e| e.to_string())?;
        let gen = GenerateConfig { count: 10, base_seed: 17 * p, bandwidth: Bandwidth::Fixed(0.0) };
        for c in generate(&prompt, &w, &gen).map_err(|e| e.to_string())? {
            check(c.weights.shape_list() == prompt.shape_list(), || format!("prompt {p}: shape lists differ"))?;
            check(same_bits(&c.weights, &reference), || format!("prompt {p} seed {}: differs from autoencode", c.seed))?;
            total += 1;
        }
    }
    Ok(format!("{total} candidates over 10 prompts bitwise equal to autoencode"))
}

fn desk_model_config() -> AutoencoderConfig {
    AutoencoderConfig {
        d_t: 8,
        latent_dim: 32,
        proj_dim: 16,
        num_layers_enc: 2,
        num_layers_dec: 2,
        num_heads: 4,
        ff_dim: 64,
        window: 8,
        max_layer_index: 3,
        max_k_index: 31,
    }
}

fn zoo_sequences(zoo: &Zoo, d_t: usize) -> Result<Vec<TokenSequence>, String> {
    zoo.members.iter().map(|m| tokenize_model(&m.weights, d_t).map_err(|e| e.to_string())).collect()
}

fn desk_table() -> Outcome {
    let start = Instant::now();
    let zoo = build_zoo(&ZooSpec::desk(50, 5, 0).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mean_zoo = zoo.members.iter().map(|m| m.test.accuracy).sum::<f64>() / zoo.members.len() as f64;
    let model_cfg = desk_model_config();
    let data = zoo_sequences(&zoo, model_cfg.d_t)?;
    let tc = TrainingConfig { epochs: 200, ..TrainingConfig::default() };
    let out = train(&data, &tc, &model_cfg, None, None).map_err(|e| e.to_string())?;
    let (initial, last) = (out.history.initial_train_loss, out.history.final_train_loss().unwrap_or(f64::NAN));
    let cfg = ComparisonConfig {
        conditions: vec![Condition::Scratch, Condition::Generated],
        seeds: vec![0, 1, 2],
        candidates: 10,
        keep: 3,
        ..ComparisonConfig::default()
    };
    let report = run_comparison(&zoo, &out.best_weights, &cfg).map_err(|e| e.to_string())?;
    let wins = report.wins(Condition::Generated, Condition::Scratch);
    let elapsed = start.elapsed();
    let per_task: Vec<String> = report
        .tasks
        .iter()
        .map(|t| {
            let acc = |c| t.condition(c).map_or(f64::NAN, |r| r.mean_accuracy);
            format!("{:.3}/{:.3}", acc(Condition::Generated), acc(Condition::Scratch))
        })
        .collect();
    let detail = format!(
        "generated >= scratch on {wins}/5 tasks [{}], zoo acc {mean_zoo:.3}, train loss {initial:.4} -> {last:.4}, {:.0}s",
        per_task.join(" "),
        elapsed.as_secs_f64()
    );
    check(wins >= 4, || detail.clone())?;
    check(last <= 0.5 * initial, || format!("train loss did not halve: {detail}"))?;
    check(elapsed < Duration::from_secs(3600), || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn dare_statistics() -> Outcome {
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let tensor = |rng: &mut ChaCha8Rng, id: &str| {
        let values: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        TensorMap::new(id, vec![TensorRecord::new("w", vec![n], Dtype::F64, values).unwrap()]).unwrap()
    };
    let base = tensor(&mut rng, "base");
    let donors: Vec<TensorMap> = (0..3).map(|i| tensor(&mut rng, &format!("d{i}"))).collect();
    let b = base.flat_values();

    let merged = dare_merge(&base, &donors, 0.0, 1).map_err(|e| e.to_string())?.flat_values();
    let expect: Vec<f64> = (0..n)
        .map(|i| {
            let sum = donors.iter().fold(0.0, |acc, d| acc + (d.flat_values()[i] - b[i]));
            b[i] + sum / donors.len() as f64
        })
        .collect();
    check(same_slice(&merged, &expect), || "drop_p=0 is not base + mean(delta)".into())?;

    let mut detail = vec!["p=0 bitwise".to_string()];
    let donor = &donors[0];
    let d = donor.flat_values();
    for p in [0.3, 0.7] {
        let merged = dare_merge(&base, std::slice::from_ref(donor), p, 9).map_err(|e| e.to_string())?.flat_values();
        let kept = (0..n).filter(|&i| merged[i] != b[i]).count() as f64;
        let (mean_kept, sigma) = (n as f64 * (1.0 - p), (n as f64 * p * (1.0 - p)).sqrt());
        check((kept - mean_kept).abs() <= 3.0 * sigma, || format!("p={p}: kept {kept}, expected {mean_kept} +- {sigma:.1}"))?;
        // Each entry is unbiased for base + delta with variance delta^2 p/(1-p).
        let dev = (0..n).map(|i| merged[i] - d[i]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (d[i] - b[i]).powi(2)).sum::<f64>() * p / (1.0 - p);
        let half = 1.96 * var.sqrt() / n as f64;
        check(dev.abs() <= half, || format!("p={p}: merged mean off by {dev:.2e}, 95% half-width {half:.2e}"))?;
        detail.push(format!("p={p}: kept {:.4}, mean offset {dev:.1e} (CI {half:.1e})", kept / n as f64));
    }
    Ok(detail.join("; "))
}

fn pruning_count() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for case in 0..50 {
        let mut map = random_map(&mut rng, 5, 6, None);
        // Exact ties and pre-existing zeros.
        if case % 3 == 0 {
            let flat: Vec<f64> = map.flat_values().iter().map(|v| (v * 2.0).round() / 2.0 + 0.25).collect();
            map = map.with_flat_values(&flat).unwrap();
        }
        let sparsity = rng.random_range(0.0..1.0);
        let n = map.parameter_count();
        let pruned = magnitude_prune(&map, sparsity).map_err(|e| e.to_string())?;
        let nonzero = pruned.flat_values().iter().filter(|v| **v != 0.0).count();
        let expect = n - (sparsity * n as f64).floor() as usize;
        check(nonzero == expect, || format!("case {case}: {nonzero} non-zero, expected {expect} (N={n}, s={sparsity})"))?;
    }
    Ok("50 random cases exact".into())
}

/// collect -> tokenize -> train -> generate -> evaluate under `root`.
/// Returns every produced artefact that should be reproducible.
fn pipeline_run(root: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let mut spec = ZooSpec::desk(8, 2, 3).map_err(|e| err(&e))?;
    spec.train.epochs = 10;
    let zoo_dir = root.join("zoo");
    build_zoo(&spec).map_err(|e| err(&e))?.save(&zoo_dir).map_err(|e| err(&e))?;

    let manifest = collect_dir(&zoo_dir).map_err(|e| err(&e))?;
    let model_cfg = AutoencoderConfig { latent_dim: 16, proj_dim: 8, ff_dim: 32, num_layers_enc: 1, num_layers_dec: 1, ..desk_model_config() };
    let tok_dir = root.join("tokens");
    write_token_files(&manifest, model_cfg.d_t, &tok_dir).map_err(|e| err(&e))?;
    let data = read_token_files(&tok_dir).map_err(|e| err(&e))?;

    let ae_dir = root.join("ae");
    let tc = TrainingConfig { epochs: 4, batch_size: 4, seed: 11, ..TrainingConfig::default() };
    let out = train(&data, &tc, &model_cfg, None, Some(&ae_dir)).map_err(|e| err(&e))?;
    let ae = AutoencoderWeights::load(&ae_dir.join("best.safetensors")).map_err(|e| err(&e))?;

    let paths: Vec<_> = manifest.entries.iter().map(|e| e.path.clone()).collect();
    let zoo = Zoo::load(&paths).map_err(|e| err(&e))?;
    let gen_dir = root.join("gen");
    std::fs::create_dir_all(&gen_dir).map_err(|e| err(&e))?;
    let prompt = &zoo.members[0];
    let gen = GenerateConfig { count: 6, base_seed: 40, bandwidth: Bandwidth::Scott };
    let candidates = generate(&prompt.weights, &ae, &gen).map_err(|e| err(&e))?;
    let probe = TaskProbe::new(&zoo.tasks[prompt.task_index], Default::default());
    let mut files = Vec::new();
    for c in rank_candidates(candidates, &probe, 3).map_err(|e| err(&e))? {
        let path = save_candidate(&gen_dir, &c).map_err(|e| err(&e))?;
        files.push((path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).map_err(|e| err(&e))?));
    }

    let cfg = ComparisonConfig {
        seeds: vec![5, 6],
        candidates: 4,
        keep: 2,
        finetune: FinetuneConfig { epochs: 3, ..FinetuneConfig::default() },
        ..ComparisonConfig::default()
    };
    let report = run_comparison(&zoo, &ae, &cfg).map_err(|e| err(&e))?;

    // Entry paths differ between runs; everything else must not.
    let entries: Vec<String> =
        manifest.entries.iter().map(|e| format!("{} {:?} {}", e.source_id, e.arch, e.parameter_count)).collect();
    files.push(("manifest".into(), entries.join("\n").into_bytes()));
    for name in ["zoo000.tokens.safetensors", "zoo000.tokens.json"] {
        files.push((name.into(), std::fs::read(tok_dir.join(name)).map_err(|e| err(&e))?));
    }
    files.push(("history".into(), std::fs::read(ae_dir.join("history.jsonl")).map_err(|e| err(&e))?));
    files.push(("best".into(), std::fs::read(ae_dir.join("best.safetensors")).map_err(|e| err(&e))?));
    files.push(("final".into(), write_checkpoint(&out.final_weights.to_tensor_map("final"))));
    files.push(("report".into(), report.to_json().into_bytes()));
    files.push(("table".into(), report.render_table().into_bytes()));
    Ok(files)
}

fn pipeline_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = pipeline_run(&tmp.path().join("a"))?;
    let b = pipeline_run(&tmp.path().join("b"))?;
    check(a.len() == b.len(), || "runs produced different artefact sets".into())?;
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        check(na == nb && ba == bb, || format!("{na} differs between runs"))?;
    }
    Ok(format!("{} artefacts identical across two runs", a.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("tokenization round-trip", tokenization_round_trip),
        ("container round-trip and fuzz", container_round_trip_and_fuzz),
        ("loss oracles", loss_oracles),
        ("gradient check", gradient_check_criterion),
        ("objective endpoints", objective_endpoints),
        ("zero-bandwidth generation", zero_bandwidth_generation),
        ("generated vs scratch on the desk zoo", desk_table),
        ("DARE statistics", dare_statistics),
        ("pruning count", pruning_count),
        ("pipeline determinism", pipeline_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
