//! Straight-line reference forward pass. Reads parameters by name from the
//! persisted tensor map and uses nothing but nested loops over `Vec`s.

use wf_core::checkpoint::TensorMap;
use wf_core::model::AutoencoderConfig;
use wf_core::tokenizer::Position;

type Mat = Vec<Vec<f64>>;

fn param<'a>(map: &'a TensorMap, name: &str) -> &'a [f64] {
    map.get(name).unwrap_or_else(|| panic!("missing {name}")).values()
}

fn affine(map: &TensorMap, prefix: &str, x: &Mat, out_dim: usize) -> Mat {
    let w = param(map, &format!("{prefix}.weight"));
    let b = param(map, &format!("{prefix}.bias"));
    let in_dim = x[0].len();
    x.iter()
        .map(|row| {
            (0..out_dim)
                .map(|o| {
                    let mut acc = b[o];
                    for i in 0..in_dim {
                        acc += row[i] * w[i * out_dim + o];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn norm(map: &TensorMap, prefix: &str, x: &Mat) -> Mat {
    let g = param(map, &format!("{prefix}.gain"));
    let b = param(map, &format!("{prefix}.bias"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let denom = (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) / denom * g[j] + b[j]).collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn attention(map: &TensorMap, prefix: &str, x: &Mat, heads: usize, valid: &[bool]) -> Mat {
    let d = x[0].len();
    let q = affine(map, &format!("{prefix}.query"), x, d);
    let k = affine(map, &format!("{prefix}.key"), x, d);
    let v = affine(map, &format!("{prefix}.value"), x, d);
    let dh = d / heads;
    let rows = x.len();
    let mut concat = vec![vec![0.0; d]; rows];
    for h in 0..heads {
        for i in 0..rows {
            let mut weights = vec![0.0; rows];
            for j in 0..rows {
                if valid[j] {
                    let mut dot = 0.0;
                    for c in h * dh..(h + 1) * dh {
                        dot += q[i][c] * k[j][c];
                    }
                    weights[j] = (dot / (dh as f64).sqrt()).exp();
                }
            }
            let total: f64 = weights.iter().sum();
            for j in 0..rows {
                for c in h * dh..(h + 1) * dh {
                    concat[i][c] += weights[j] / total * v[j][c];
                }
            }
        }
    }
    affine(map, &format!("{prefix}.out"), &concat, d)
}

fn block(map: &TensorMap, prefix: &str, cfg: &AutoencoderConfig, x: &Mat, valid: &[bool]) -> Mat {
    let a = norm(map, &format!("{prefix}.norm_attn"), x);
    let h = add(x, &attention(map, &format!("{prefix}.attn"), &a, cfg.num_heads, valid));
    let b = norm(map, &format!("{prefix}.norm_ff"), &h);
    let hidden: Mat = affine(map, &format!("{prefix}.ff_in"), &b, cfg.ff_dim)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    add(&h, &affine(map, &format!("{prefix}.ff_out"), &hidden, cfg.latent_dim))
}

fn positions(map: &TensorMap, cfg: &AutoencoderConfig, pos: &[Position]) -> Mat {
    let d = cfg.latent_dim;
    let (pn, pl, pk) = (param(map, "position.n"), param(map, "position.l"), param(map, "position.k"));
    pos.iter()
        .map(|p| {
            let n = p.n % cfg.window;
            let l = p.l.min(cfg.max_layer_index);
            let k = p.k.min(cfg.max_k_index);
            (0..d).map(|j| pn[n * d + j] + pl[l * d + j] + pk[k * d + j]).collect()
        })
        .collect()
}

pub fn encode(map: &TensorMap, cfg: &AutoencoderConfig, tokens: &Mat, pos: &[Position], valid: &[bool]) -> Mat {
    let mut x = add(&affine(map, "encoder.input", tokens, cfg.latent_dim), &positions(map, cfg, pos));
    for i in 0..cfg.num_layers_enc {
        x = block(map, &format!("encoder.block{i}"), cfg, &x, valid);
    }
    norm(map, "encoder.norm", &x)
}

pub fn decode(map: &TensorMap, cfg: &AutoencoderConfig, z: &Mat, pos: &[Position], valid: &[bool]) -> Mat {
    let mut x = add(z, &positions(map, cfg, pos));
    for i in 0..cfg.num_layers_dec {
        x = block(map, &format!("decoder.block{i}"), cfg, &x, valid);
    }
    let x = norm(map, "decoder.norm", &x);
    affine(map, "decoder.output", &x, cfg.d_t)
}

pub fn project(map: &TensorMap, cfg: &AutoencoderConfig, z: &Mat, valid: &[bool]) -> Vec<f64> {
    let hidden: Mat = affine(map, "projection.hidden", z, cfg.latent_dim)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let per_token = affine(map, "projection.out", &hidden, cfg.proj_dim);
    let count = valid.iter().filter(|&&v| v).count() as f64;
    let mut pooled = vec![0.0; cfg.proj_dim];
    for (row, _) in per_token.iter().zip(valid).filter(|(_, &v)| v) {
        for j in 0..cfg.proj_dim {
            pooled[j] += row[j] / count;
        }
    }
    let len = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
    pooled.iter().map(|v| v / len).collect()
}

/// Explicit similarity matrix and explicit softmax, no log-sum-exp.
pub fn ntxent(views_i: &[Vec<f64>], views_j: &[Vec<f64>], temperature: f64) -> f64 {
    let all: Vec<&Vec<f64>> = views_i.iter().chain(views_j).collect();
    let n = all.len();
    let b = views_i.len();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = all[i].iter().zip(all[j]).map(|(x, y)| x * y).sum();
            let ni: f64 = all[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            let nj: f64 = all[j].iter().map(|x| x * x).sum::<f64>().sqrt();
            sim[i][j] = dot / (ni * nj) / temperature;
        }
    }
    let mut loss = 0.0;
    for a in 0..n {
        let positive = if a < b { a + b } else { a - b };
        let denom: f64 = (0..n).filter(|&k| k != a).map(|k| sim[a][k].exp()).sum();
        loss += -(sim[a][positive].exp() / denom).ln();
    }
    loss / n as f64
}

pub fn recon(target: &Mat, recon: &Mat, mask: &Mat, norm: f64) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..target.len() {
        for j in 0..target[i].len() {
            if mask[i][j] == 1.0 {
                sum += (target[i][j] - recon[i][j]).powi(2);
                count += 1;
            }
        }
    }
    sum / (norm * count as f64)
}
