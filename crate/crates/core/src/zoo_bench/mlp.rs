//! ReLU perceptron classifier with parameters `fc{i}.weight` `[out, in]` and
//! `fc{i}.bias` `[out]`.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::task::{Dataset, Split, ToyTask};
use super::ZooError;
use crate::checkpoint::{Dtype, TensorMap, TensorRecord};
use crate::training::{adamw_step, derive_seed, AdamHyper, OptimizerState};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
}

impl Mlp {
    /// He-normal weights, zero biases.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self, ZooError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(ZooError::InvalidArgument(format!("layer widths {widths:?}")));
        }
        let mut mlp = Self { widths: widths.to_vec(), params: vec![0.0; Self::count(widths)] };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in 0..widths.len() - 1 {
            let normal = Normal::new(0.0, (2.0 / widths[layer] as f64).sqrt()).expect("positive std");
            let (w, _) = mlp.ranges(layer);
            for v in &mut mlp.params[w] {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(mlp)
    }

    fn count(widths: &[usize]) -> usize {
        widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    fn ranges(&self, layer: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start: usize = self.widths.windows(2).take(layer).map(|p| p[0] * p[1] + p[1]).sum();
        let (i, o) = (self.widths[layer], self.widths[layer + 1]);
        (start..start + i * o, start + i * o..start + i * o + o)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Reads `fc0..fcK`; widths must chain and match `expected` when given.
    pub fn from_map(map: &TensorMap, expected: Option<&[usize]>) -> Result<Self, ZooError> {
        let mismatch = |why: String| ZooError::ShapeMismatch(format!("{}: {why}", map.source_id()));
        let mut widths = Vec::new();
        let mut layer = 0;
        while let Some(w) = map.get(&format!("fc{layer}.weight")) {
            let [o, i] = w.shape() else { return Err(mismatch(format!("fc{layer}.weight has rank {}", w.rank()))) };
            if widths.is_empty() {
                widths.push(*i);
            } else if widths.last() != Some(i) {
                return Err(mismatch(format!("fc{layer}.weight input {i} does not chain")));
            }
            widths.push(*o);
            layer += 1;
        }
        if layer == 0 {
            return Err(mismatch("no fc0.weight".into()));
        }
        if map.len() != 2 * layer {
            return Err(mismatch(format!("expected {} tensors, found {}", 2 * layer, map.len())));
        }
        if let Some(e) = expected.filter(|e| *e != widths.as_slice()) {
            return Err(mismatch(format!("widths {widths:?}, expected {e:?}")));
        }
        let mut mlp = Self { params: vec![0.0; Self::count(&widths)], widths };
        for l in 0..layer {
            let (wr, br) = mlp.ranges(l);
            let w = map.get(&format!("fc{l}.weight")).expect("seen above");
            let b = map.get(&format!("fc{l}.bias")).ok_or_else(|| mismatch(format!("missing fc{l}.bias")))?;
            if b.shape() != [mlp.widths[l + 1]] {
                return Err(mismatch(format!("fc{l}.bias has shape {:?}", b.shape())));
            }
            mlp.params[wr].copy_from_slice(w.values());
            mlp.params[br].copy_from_slice(b.values());
        }
        Ok(mlp)
    }

    pub fn to_map(&self, source_id: impl Into<String>, dtype: Dtype) -> TensorMap {
        let records = (0..self.widths.len() - 1)
            .flat_map(|l| {
                let (wr, br) = self.ranges(l);
                let (i, o) = (self.widths[l], self.widths[l + 1]);
                [
                    TensorRecord::new(format!("fc{l}.weight"), vec![o, i], dtype, self.params[wr].to_vec()),
                    TensorRecord::new(format!("fc{l}.bias"), vec![o], dtype, self.params[br].to_vec()),
                ]
            })
            .collect::<Result<Vec<_>, _>>()
            .expect("finite parameters with consistent shapes");
        TensorMap::new(source_id, records).expect("unique names")
    }

    /// Fresh He-normal weights for the last layer.
    pub fn reinit_head(&mut self, seed: u64) {
        let last = self.widths.len() - 2;
        let fresh = Self::init(&self.widths, seed).expect("widths already valid");
        let (wr, br) = self.ranges(last);
        self.params[wr.start..br.end].copy_from_slice(&fresh.params[wr.start..br.end]);
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ndarray::ArrayView1<'_, f64>) {
        let (wr, br) = self.ranges(l);
        let w = ArrayView2::from_shape((self.widths[l + 1], self.widths[l]), &self.params[wr]).expect("layer shape");
        (w, ndarray::ArrayView1::from(&self.params[br]))
    }

    /// Pre-activations of every layer; the last entry holds the logits.
    fn forward(&self, x: &ArrayView2<f64>) -> Vec<Array2<f64>> {
        let layers = self.widths.len() - 1;
        let mut pre = Vec::with_capacity(layers);
        let mut h = x.to_owned();
        for l in 0..layers {
            let (w, b) = self.layer(l);
            let z = h.dot(&w.t()) + b;
            h = if l + 1 < layers { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            pre.push(z);
        }
        pre
    }

    pub fn logits(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        self.forward(x).pop().expect("at least one layer")
    }

    pub fn evaluate(&self, data: &Dataset) -> Metrics {
        let logits = self.logits(&data.x.view());
        let (loss, _) = cross_entropy(&logits, &data.y);
        let correct = logits
            .rows()
            .into_iter()
            .zip(&data.y)
            .filter(|(row, &y)| argmax(row.iter().copied()) == y)
            .count();
        Metrics { loss, accuracy: correct as f64 / data.y.len() as f64 }
    }

    /// Mean cross-entropy over the rows of `x` and its gradient.
    pub fn loss_and_grad(&self, x: &ArrayView2<f64>, y: &[usize]) -> (f64, Vec<f64>) {
        let pre = self.forward(x);
        let layers = pre.len();
        let (loss, mut delta) = cross_entropy(&pre[layers - 1], y);
        let mut grad = vec![0.0; self.params.len()];
        for l in (0..layers).rev() {
            let input = if l == 0 { x.to_owned() } else { pre[l - 1].mapv(|v| v.max(0.0)) };
            let (wr, br) = self.ranges(l);
            let gw = delta.t().dot(&input);
            grad[wr].copy_from_slice(gw.as_slice().expect("standard layout"));
            grad[br].copy_from_slice(delta.sum_axis(Axis(0)).as_slice().expect("contiguous"));
            if l > 0 {
                let (w, _) = self.layer(l);
                let mut d = delta.dot(&w);
                ndarray::Zip::from(&mut d).and(&pre[l - 1]).for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
                delta = d;
            }
        }
        (loss, grad)
    }
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    it.enumerate().fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best }).0
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
fn cross_entropy(logits: &Array2<f64>, y: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (mut row, &label) in grad.rows_mut().into_iter().zip(y) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        loss -= (row[label] / total).ln();
        row.mapv_inplace(|v| v / total / n);
        row[label] -= 1.0 / n;
    }
    (loss / n, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub reinit_head: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 32, lr: 3e-3, weight_decay: 0.0, reinit_head: false }
    }
}

/// Per-epoch validation metrics (entry 0 is the untouched init) and the test
/// metric of the epoch with the lowest validation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub val: Vec<Metrics>,
    pub best_epoch: usize,
    pub test: Metrics,
}

/// Minibatch AdamW at a constant learning rate. Returns the trajectory and
/// the weights of the best validation epoch.
pub fn fit(mut mlp: Mlp, task: &ToyTask, cfg: &FinetuneConfig, seed: u64) -> Result<(Trajectory, Mlp), ZooError> {
    let train = task.data(Split::Train);
    let val = task.data(Split::Val);
    let test = task.data(Split::Test);
    if cfg.reinit_head {
        mlp.reinit_head(derive_seed(seed, &[7]));
    }
    let mut history = vec![mlp.evaluate(&val)];
    let mut best = (history[0].loss, 0usize, mlp.clone());
    let mut state = OptimizerState::new(mlp.params.len());
    let batch = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..train.y.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64])));
        for idx in order.chunks(batch) {
            let x = train.x.select(Axis(0), idx);
            let y: Vec<usize> = idx.iter().map(|&i| train.y[i]).collect();
            let (_, grad) = mlp.loss_and_grad(&x.view(), &y);
            adamw_step(&mut mlp.params, &grad, &mut state, cfg.lr, cfg.weight_decay, AdamHyper::default())?;
        }
        let m = mlp.evaluate(&val);
        history.push(m);
        // Epoch 0 only counts when no training happens.
        if epoch == 1 || m.loss < best.0 {
            best = (m.loss, epoch, mlp.clone());
        }
    }
    let test = best.2.evaluate(&test);
    Ok((Trajectory { val: history, best_epoch: best.1, test }, best.2))
}

/// Fine-tune a checkpoint; the task's input and class counts must match.
pub fn finetune(init: &TensorMap, task: &ToyTask, cfg: &FinetuneConfig, seed: u64) -> Result<Trajectory, ZooError> {
    let mlp = Mlp::from_map(init, None)?;
    let (first, last) = (mlp.widths[0], *mlp.widths.last().expect("two widths"));
    if first != task.input_dim || last != task.num_classes {
        return Err(ZooError::ShapeMismatch(format!(
            "network maps {first} -> {last}, task {} needs {} -> {}",
            task.name, task.input_dim, task.num_classes
        )));
    }
    fit(mlp, task, cfg, seed).map(|(t, _)| t)
}
