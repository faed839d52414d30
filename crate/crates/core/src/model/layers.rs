//! Forward and reverse-mode passes of the transformer building blocks.
//!
//! Every forward function returns the activations its backward counterpart
//! needs. Backward functions accumulate parameter gradients into a flat
//! buffer laid out like the parameter vector and return the input gradient.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{AttentionSlots, BlockSlots, LinearSlots, NormSlots};

pub const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn linear(p: &[f64], s: &LinearSlots, x: &ArrayView2<f64>) -> Array2<f64> {
    x.dot(&s.weight.view(p)) + s.bias.view(p).row(0)
}

pub fn linear_back(
    p: &[f64],
    g: &mut [f64],
    s: &LinearSlots,
    x: &ArrayView2<f64>,
    dy: &ArrayView2<f64>,
) -> Array2<f64> {
    s.weight.view_mut(g).scaled_add(1.0, &x.t().dot(dy));
    s.bias.view_mut(g).row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    dy.dot(&s.weight.view(p).t())
}

#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub fn layer_norm(p: &[f64], s: &NormSlots, x: &ArrayView2<f64>) -> (Array2<f64>, NormCache) {
    let cols = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / cols;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / cols;
        *is = 1.0 / (var + NORM_EPS).sqrt();
        let k = *is;
        row.mapv_inplace(|v| v * k);
    }
    let y = &xhat * &s.gain.view(p).row(0) + s.bias.view(p).row(0);
    (y, NormCache { xhat, inv_std })
}

pub fn layer_norm_back(
    p: &[f64],
    g: &mut [f64],
    s: &NormSlots,
    cache: &NormCache,
    dy: &ArrayView2<f64>,
) -> Array2<f64> {
    s.gain.view_mut(g).row_mut(0).scaled_add(1.0, &(dy * &cache.xhat).sum_axis(Axis(0)));
    s.bias.view_mut(g).row_mut(0).scaled_add(1.0, &dy.sum_axis(Axis(0)));
    let dxhat = dy * &s.gain.view(p).row(0);
    let cols = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (i, mut out) in dx.rows_mut().into_iter().enumerate() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / cols;
        let mean_dh_xh = dh.dot(&xh) / cols;
        let is = cache.inv_std[i];
        Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &d, &x| {
            *o = is * (d - mean_dh - x * mean_dh_xh);
        });
    }
    dx
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    input: Array2<f64>,
    query: Array2<f64>,
    key: Array2<f64>,
    value: Array2<f64>,
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

/// Bidirectional multi-head self-attention. Keys flagged invalid (padding
/// rows) receive zero attention weight.
pub fn attention(
    p: &[f64],
    s: &AttentionSlots,
    x: &ArrayView2<f64>,
    heads: usize,
    key_valid: &[bool],
) -> (Array2<f64>, AttentionCache) {
    let query = linear(p, &s.query, x);
    let key = linear(p, &s.key, x);
    let value = linear(p, &s.value, x);
    let rows = x.nrows();
    let dh = x.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let any_valid = key_valid.iter().any(|&v| v);
    let mut concat = Array2::zeros((rows, x.ncols()));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = query.slice(cols).dot(&key.slice(cols).t()) * scale;
        for mut row in scores.rows_mut() {
            let max = row
                .iter()
                .zip(key_valid)
                .filter(|(_, &ok)| ok || !any_valid)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (v, &ok) in row.iter_mut().zip(key_valid) {
                *v = if ok || !any_valid { (*v - max).exp() } else { 0.0 };
                total += *v;
            }
            row.mapv_inplace(|v| v / total);
        }
        concat.slice_mut(cols).assign(&scores.dot(&value.slice(cols)));
        probs.push(scores);
    }
    let out = linear(p, &s.out, &concat.view());
    (out, AttentionCache { input: x.to_owned(), query, key, value, probs, concat })
}

pub fn attention_back(
    p: &[f64],
    g: &mut [f64],
    s: &AttentionSlots,
    cache: &AttentionCache,
    dy: &ArrayView2<f64>,
    heads: usize,
) -> Array2<f64> {
    let dconcat = linear_back(p, g, &s.out, &cache.concat.view(), dy);
    let width = cache.query.ncols();
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(cache.query.raw_dim());
    let mut dk = Array2::zeros(cache.key.raw_dim());
    let mut dv = Array2::zeros(cache.value.raw_dim());
    for (h, probs) in cache.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dout = dconcat.slice(cols);
        let dprobs = dout.dot(&cache.value.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&dout));
        let mut dscores = dprobs;
        for (mut row, prow) in dscores.rows_mut().into_iter().zip(probs.rows()) {
            let inner = row.dot(&prow);
            Zip::from(&mut row).and(&prow).for_each(|d, &pr| *d = pr * (*d - inner));
        }
        dq.slice_mut(cols).assign(&(dscores.dot(&cache.key.slice(cols)) * scale));
        dk.slice_mut(cols).assign(&(dscores.t().dot(&cache.query.slice(cols)) * scale));
    }
    let x = cache.input.view();
    let mut dx = linear_back(p, g, &s.query, &x, &dq.view());
    dx += &linear_back(p, g, &s.key, &x, &dk.view());
    dx += &linear_back(p, g, &s.value, &x, &dv.view());
    dx
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    norm_attn: NormCache,
    attn: AttentionCache,
    norm_ff: NormCache,
    ff_input: Array2<f64>,
    pre_activation: Array2<f64>,
    activation: Array2<f64>,
}

/// Pre-norm transformer block: `h = x + attn(ln(x))`, `y = h + ff(ln(h))`.
pub fn block(
    p: &[f64],
    s: &BlockSlots,
    x: &ArrayView2<f64>,
    heads: usize,
    key_valid: &[bool],
) -> (Array2<f64>, BlockCache) {
    let (a, norm_attn) = layer_norm(p, &s.norm_attn, x);
    let (att, attn) = attention(p, &s.attn, &a.view(), heads, key_valid);
    let h = x + &att;
    let (ff_input, norm_ff) = layer_norm(p, &s.norm_ff, &h.view());
    let pre_activation = linear(p, &s.ff_in, &ff_input.view());
    let activation = pre_activation.mapv(gelu);
    let y = h + linear(p, &s.ff_out, &activation.view());
    (y, BlockCache { norm_attn, attn, norm_ff, ff_input, pre_activation, activation })
}

pub fn block_back(
    p: &[f64],
    g: &mut [f64],
    s: &BlockSlots,
    cache: &BlockCache,
    dy: &ArrayView2<f64>,
    heads: usize,
) -> Array2<f64> {
    let dact = linear_back(p, g, &s.ff_out, &cache.activation.view(), dy);
    let dpre = dact * &cache.pre_activation.mapv(gelu_grad);
    let dff_input = linear_back(p, g, &s.ff_in, &cache.ff_input.view(), &dpre.view());
    let dh = dy + &layer_norm_back(p, g, &s.norm_ff, &cache.norm_ff, &dff_input.view());
    let da = attention_back(p, g, &s.attn, &cache.attn, &dh.view(), heads);
    dh + layer_norm_back(p, g, &s.norm_attn, &cache.norm_attn, &da.view())
}
