use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ZooError;
use crate::training::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub probe: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { train: 256, val: 128, probe: 128, test: 512 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Probe,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Probe => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
}

/// Isotropic Gaussian blobs, one per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub name: String,
    pub input_dim: usize,
    pub num_classes: usize,
    pub class_means: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub splits: SplitSizes,
    pub seed: u64,
}

impl ToyTask {
    /// Class means are drawn from `N(0, separation^2)` per coordinate.
    pub fn blobs(
        name: impl Into<String>,
        input_dim: usize,
        num_classes: usize,
        separation: f64,
        noise_std: f64,
        splits: SplitSizes,
        seed: u64,
    ) -> Result<Self, ZooError> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[u64::MAX]));
        let class_means = (0..num_classes)
            .map(|_| {
                (0..input_dim)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        separation * e
                    })
                    .collect()
            })
            .collect();
        let task = Self { name: name.into(), input_dim, num_classes, class_means, noise_std, splits, seed };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<(), ZooError> {
        let degenerate = |why: String| Err(ZooError::TaskDegenerate(format!("{}: {why}", self.name)));
        if self.num_classes < 2 || self.input_dim == 0 {
            return degenerate("needs at least two classes and one input".into());
        }
        if self.class_means.len() != self.num_classes || self.class_means.iter().any(|m| m.len() != self.input_dim) {
            return degenerate("class means do not match the dimensions".into());
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return degenerate(format!("noise std {}", self.noise_std));
        }
        let s = self.splits;
        if s.train == 0 || s.val == 0 || s.probe == 0 || s.test == 0 {
            return degenerate("empty split".into());
        }
        for a in 0..self.num_classes {
            for b in a + 1..self.num_classes {
                let d2: f64 =
                    self.class_means[a].iter().zip(&self.class_means[b]).map(|(p, q)| (p - q) * (p - q)).sum();
                if d2.sqrt() < 1e-6 * self.noise_std {
                    return degenerate(format!("classes {a} and {b} coincide"));
                }
            }
        }
        Ok(())
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.splits.train,
            Split::Val => self.splits.val,
            Split::Probe => self.splits.probe,
            Split::Test => self.splits.test,
        }
    }

    /// Balanced labels `i mod classes`; each split draws from its own stream.
    pub fn data(&self, split: Split) -> Dataset {
        let n = self.split_size(split);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[split.stream()]));
        let y: Vec<usize> = (0..n).map(|i| i % self.num_classes).collect();
        let mut x = Array2::zeros((n, self.input_dim));
        for (i, mut row) in x.rows_mut().into_iter().enumerate() {
            for (v, m) in row.iter_mut().zip(&self.class_means[y[i]]) {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v = m + self.noise_std * e;
            }
        }
        Dataset { x, y }
    }
}

/// `count` blob tasks with 8 inputs and 4 classes.
pub fn default_tasks(count: usize, seed: u64) -> Result<Vec<ToyTask>, ZooError> {
    (0..count)
        .map(|i| ToyTask::blobs(format!("blobs{i}"), 8, 4, 0.7, 1.0, SplitSizes::default(), derive_seed(seed, &[i as u64])))
        .collect()
}
