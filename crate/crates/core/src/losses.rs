//! Distances between ground-truth (`P`) and predicted (`Q`) insertion
//! distributions, as plain functions and as differentiable graph builders.

use seqinsert_tensor::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to predicted probabilities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Kl,
    Emd,
}

fn check_len(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Contract(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// `sum P_i log(P_i / Q_i)`, with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_len(p, q)?;
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(LOG_FLOOR).ln()))
        .sum())
}

/// Cross-entropy `-sum P_i log Q_i`; equals the KL divergence plus `H(P)`.
pub fn kl_loss(p: &[f64], q: &[f64]) -> Result<f64> {
    check_len(p, q)?;
    Ok(-p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * qi.max(LOG_FLOOR).ln())
        .sum::<f64>())
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// 1-D earth mover's distance on a unit grid: the summed absolute difference
/// of the two cumulative distributions.
pub fn emd_loss(p: &[f64], q: &[f64]) -> Result<f64> {
    check_len(p, q)?;
    let mut cdf = 0.0;
    let mut total = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        cdf += pi - qi;
        total += cdf.abs();
    }
    Ok(total)
}

/// Mean over weighted rows of `-sum_j P_ij log Q_ij`. `targets` rows of
/// padded queries should be zero with weight zero.
pub fn kl_loss_graph<T: Scalar>(g: &mut Graph<T>, probs: Var, targets: &Tensor<T>, n_rows: usize) -> Result<Var> {
    let t = g.constant(targets.clone());
    let logq = g.log_floor(probs, T::from_f64c(LOG_FLOOR));
    let prod = g.mul(t, logq)?;
    let total = g.sum(prod);
    Ok(g.scale(total, T::from_f64c(-1.0 / n_rows as f64)))
}

/// Mean over weighted rows of the CDF-difference EMD. `row_weights` has one
/// entry per row (1 for supervised rows, 0 for padding).
pub fn emd_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    targets: &Tensor<T>,
    row_weights: &[T],
) -> Result<Var> {
    let shape = g.value(probs).shape().to_vec();
    let cols = *shape.last().unwrap();
    let n_rows = row_weights.iter().filter(|w| **w != T::zero()).count().max(1);
    let w: Vec<T> = row_weights.iter().flat_map(|&w| std::iter::repeat_n(w, cols)).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let t = g.constant(targets.clone());
    let diff = g.sub(t, probs)?;
    let masked = g.mul(diff, w)?;
    let cdf = g.cumsum_rows(masked);
    let abs = g.abs(cdf);
    let total = g.sum(abs);
    Ok(g.scale(total, T::from_f64c(1.0 / n_rows as f64)))
}
