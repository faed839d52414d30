//! Weight-space baselines: drop-and-rescale merging and magnitude pruning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ZooError;
use crate::checkpoint::TensorMap;

/// `base + mean_d(keep_d * (donor_d - base) / (1 - drop_p))`, one Bernoulli
/// draw per donor entry in canonical order.
pub fn dare_merge(base: &TensorMap, donors: &[TensorMap], drop_p: f64, seed: u64) -> Result<TensorMap, ZooError> {
    if donors.is_empty() {
        return Err(ZooError::EmptyInput);
    }
    if !(0.0..1.0).contains(&drop_p) {
        return Err(ZooError::InvalidArgument(format!("drop_p {drop_p} must lie in [0, 1)")));
    }
    let shapes = base.shape_list();
    if let Some(d) = donors.iter().find(|d| d.shape_list() != shapes) {
        return Err(ZooError::ShapeMismatch(format!("donor {} differs from base {}", d.source_id(), base.source_id())));
    }
    let base_values = base.flat_values();
    let mut acc = vec![0.0; base_values.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rescale = 1.0 - drop_p;
    for donor in donors {
        for ((a, d), b) in acc.iter_mut().zip(donor.flat_values()).zip(&base_values) {
            if rng.random::<f64>() >= drop_p {
                *a += (d - b) / rescale;
            }
        }
    }
    let count = donors.len() as f64;
    let merged: Vec<f64> = base_values.iter().zip(&acc).map(|(b, a)| b + a / count).collect();
    let mut out = base.with_flat_values(&merged)?;
    out.set_source_id(format!("{}.dare", base.source_id()));
    Ok(out)
}

/// Zero the `floor(sparsity * N)` entries of smallest magnitude across all
/// tensors. Ties go to the earlier entry in canonical order.
pub fn magnitude_prune(weights: &TensorMap, sparsity: f64) -> Result<TensorMap, ZooError> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(ZooError::InvalidArgument(format!("sparsity {sparsity} must lie in [0, 1)")));
    }
    let mut values = weights.flat_values();
    let k = (sparsity * values.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
    for &i in &order[..k] {
        values[i] = 0.0;
    }
    let mut out = weights.with_flat_values(&values)?;
    out.set_source_id(format!("{}.pruned", weights.source_id()));
    Ok(out)
}
