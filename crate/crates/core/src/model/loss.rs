//! Masked reconstruction loss, NT-Xent and their convex combination.

use ndarray::{Array1, Array2, ArrayView2, Zip};

use super::network::ProjectedEmbedding;
use super::ModelError;

const UNIT_NORM_TOL: f64 = 1e-6;

/// `sum(M * (T - T_hat)^2) / (norm * count(M == 1))`.
pub fn recon_loss(
    target: &ArrayView2<f64>,
    recon: &ArrayView2<f64>,
    mask: &ArrayView2<f64>,
    norm: f64,
) -> Result<f64, ModelError> {
    recon_loss_with_grad(target, recon, mask, norm).map(|(l, _)| l)
}

/// Loss and its gradient with respect to `recon`.
pub fn recon_loss_with_grad(
    target: &ArrayView2<f64>,
    recon: &ArrayView2<f64>,
    mask: &ArrayView2<f64>,
    norm: f64,
) -> Result<(f64, Array2<f64>), ModelError> {
    if target.dim() != recon.dim() || target.dim() != mask.dim() {
        return Err(ModelError::ShapeMismatch(format!(
            "target {:?}, reconstruction {:?}, mask {:?}",
            target.dim(),
            recon.dim(),
            mask.dim()
        )));
    }
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(ModelError::InvalidArgument(format!("norm must be positive, got {norm}")));
    }
    let count = mask.iter().filter(|&&m| m != 0.0).count();
    if count == 0 {
        return Err(ModelError::EmptyMask);
    }
    let denom = norm * count as f64;
    let mut sum = 0.0;
    let mut grad = Array2::zeros(recon.raw_dim());
    Zip::from(&mut grad).and(target).and(recon).and(mask).for_each(|g, &t, &r, &m| {
        if m != 0.0 {
            let diff = m * (t - r);
            sum += diff * diff;
            *g = -2.0 * m * diff / denom;
        }
    });
    Ok((sum / denom, grad))
}

fn check_unit(e: &Array1<f64>) -> Result<(), ModelError> {
    let n = e.dot(e).sqrt();
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(ModelError::InvalidArgument(format!("embedding norm {n} is not 1")));
    }
    Ok(())
}

/// NT-Xent over the `2B` views of `B` pairs, averaged over all anchors.
pub fn ntxent_loss(pairs: &[(ProjectedEmbedding, ProjectedEmbedding)], temperature: f64) -> Result<f64, ModelError> {
    let views: Vec<Array1<f64>> =
        pairs.iter().map(|(a, _)| a.0.clone()).chain(pairs.iter().map(|(_, b)| b.0.clone())).collect();
    ntxent_with_grad(&views, temperature).map(|(l, _)| l)
}

/// `views` holds the first views of all pairs followed by the second views,
/// so the positive of anchor `a` is `(a + B) mod 2B`. Returns the loss and
/// its gradient w.r.t. each view.
pub fn ntxent_with_grad(views: &[Array1<f64>], temperature: f64) -> Result<(f64, Vec<Array1<f64>>), ModelError> {
    if !(temperature > 0.0) {
        return Err(ModelError::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    if !views.len().is_multiple_of(2) {
        return Err(ModelError::InvalidArgument("views must come in pairs".into()));
    }
    let n = views.len();
    let b = n / 2;
    if b < 2 {
        return Err(ModelError::SinglePair);
    }
    views.iter().try_for_each(check_unit)?;

    let mut sim = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            sim[[i, j]] = views[i].dot(&views[j]) / temperature;
        }
    }
    let mut loss = 0.0;
    let mut dsim = Array2::<f64>::zeros((n, n));
    for a in 0..n {
        let pos = (a + b) % n;
        let max = (0..n).filter(|&k| k != a).map(|k| sim[[a, k]]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = (0..n).filter(|&k| k != a).map(|k| (sim[[a, k]] - max).exp()).sum();
        let log_z = max + total.ln();
        loss += log_z - sim[[a, pos]];
        for k in (0..n).filter(|&k| k != a) {
            let softmax = (sim[[a, k]] - log_z).exp();
            dsim[[a, k]] = (softmax - if k == pos { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    let mut grads = vec![Array1::zeros(views[0].len()); n];
    for a in 0..n {
        for k in 0..n {
            let d = dsim[[a, k]];
            if d != 0.0 {
                grads[a].scaled_add(d / temperature, &views[k]);
                grads[k].scaled_add(d / temperature, &views[a]);
            }
        }
    }
    Ok((loss / n as f64, grads))
}

/// `(1 - gamma) * l_rec + gamma * l_c`.
pub fn total_loss(l_rec: f64, l_c: f64, gamma: f64) -> f64 {
    (1.0 - gamma) * l_rec + gamma * l_c
}
