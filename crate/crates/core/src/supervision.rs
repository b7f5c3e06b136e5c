//! Ground truth: piecewise-linear position scores, nearest-score insertion
//! positions, and truncated Gaussian insertion targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{validate_order, KeySet, KeySliceLabel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisionConfig {
    /// Standard deviation of the insertion target, millimeters.
    pub sigma_mm: f64,
    pub key_names: Vec<String>,
    pub key_scores: Vec<f64>,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        let keys = KeySet::default();
        Self {
            sigma_mm: 5.0,
            key_names: keys.names().to_vec(),
            key_scores: keys.scores().to_vec(),
        }
    }
}

impl SupervisionConfig {
    pub fn key_set(&self) -> Result<KeySet> {
        KeySet::new(self.key_names.clone(), self.key_scores.clone())
    }
}

/// Per-slice anatomical position scores of one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionScoreMap {
    pub scores: Vec<f64>,
}

impl PositionScoreMap {
    /// Scores at the given slice indices.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().map(|&i| self.scores[i]).collect()
    }
}

/// Linear interpolation between adjacent key slices, continued with the
/// outermost segments' slopes beyond the first and last key.
pub fn interpolate_scores(labels: &[KeySliceLabel], n_slices: usize, keys: &KeySet) -> Result<PositionScoreMap> {
    if labels.len() < 2 {
        return Err(Error::InsufficientLabels(labels.len()));
    }
    let mut sorted = labels.to_vec();
    for l in &sorted {
        if keys.rank(&l.key_name).is_none() {
            return Err(Error::UnknownKey(l.key_name.clone()));
        }
    }
    sorted.sort_by_key(|l| keys.rank(&l.key_name));
    validate_order("<labels>", &sorted)?;
    let knots: Vec<(f64, f64)> = sorted
        .iter()
        .map(|l| (l.slice_index as f64, keys.score(&l.key_name).unwrap()))
        .collect();
    let scores = (0..n_slices)
        .map(|i| {
            let x = i as f64;
            // segment index: the first knot pair whose right end is >= x, clamped to the ends
            let seg = knots
                .windows(2)
                .position(|w| x <= w[1].0)
                .unwrap_or(knots.len() - 2);
            let ((x0, y0), (x1, y1)) = (knots[seg], knots[seg + 1]);
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        })
        .collect();
    Ok(PositionScoreMap { scores })
}

/// Insertion slot among the `N + 2` positions of a target whose sampled
/// slices have `target_scores`. Scores below the target range map to 0 (the
/// start boundary), above it to `N + 1`; otherwise the nearest score wins,
/// ties going to the lowest index, offset by one for the start boundary.
pub fn gt_insertion_position(query_score: f64, target_scores: &[f64]) -> usize {
    let n = target_scores.len();
    let min = target_scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = target_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if query_score < min {
        return 0;
    }
    if query_score > max {
        return n + 1;
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &s) in target_scores.iter().enumerate() {
        let d = (query_score - s).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best + 1
}

/// Truncated, renormalized Gaussian over the insertion grid.
#[derive(Clone, Debug, PartialEq)]
pub struct InsertionTarget {
    pub probs: Vec<f64>,
    pub center_index: usize,
    pub sigma_index: f64,
}

pub fn gaussian_target(center_index: usize, sigma_index: f64, n_positions: usize) -> Result<InsertionTarget> {
    if !(sigma_index.is_finite() && sigma_index > 0.0) {
        return Err(Error::Contract(format!("sigma must be positive, got {sigma_index}")));
    }
    if center_index >= n_positions {
        return Err(Error::Contract(format!(
            "center {center_index} outside a grid of {n_positions} positions"
        )));
    }
    let c = center_index as f64;
    let mut probs: Vec<f64> = (0..n_positions)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma_index * sigma_index)).exp())
        .collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(InsertionTarget {
        probs,
        center_index,
        sigma_index,
    })
}

/// Converts a physical standard deviation to index units of a sampled grid.
pub fn sigma_from_mm(sigma_mm: f64, effective_spacing_mm: f64) -> f64 {
    sigma_mm / effective_spacing_mm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys3() -> KeySet {
        KeySet::new(vec!["a".into(), "b".into(), "c".into()], vec![0.0, 10.0, 20.0]).unwrap()
    }

    fn label(k: &str, i: usize) -> KeySliceLabel {
        KeySliceLabel { key_name: k.into(), slice_index: i }
    }

    #[test]
    fn midpoint_and_extrapolation() {
        let keys = KeySet::new(vec!["a".into(), "b".into()], vec![0.0, 100.0]).unwrap();
        let m = interpolate_scores(&[label("a", 10), label("b", 20)], 30, &keys).unwrap();
        assert_eq!(m.scores[15], 50.0);
        assert_eq!(m.scores[25], 150.0);
        assert_eq!(m.scores[0], -100.0);
    }

    #[test]
    fn piecewise_segments() {
        let m = interpolate_scores(&[label("a", 0), label("b", 10), label("c", 30)], 31, &keys3()).unwrap();
        assert_eq!(m.scores[20], 15.0);
        assert_eq!(m.scores[10], 10.0);
    }

    #[test]
    fn too_few_labels() {
        assert!(matches!(
            interpolate_scores(&[label("a", 0)], 5, &keys3()),
            Err(Error::InsufficientLabels(1))
        ));
    }

    #[test]
    fn insertion_position_rules() {
        let t: Vec<f64> = (0..10).map(|i| 10.0 + i as f64).collect();
        assert_eq!(gt_insertion_position(3.0, &t), 0);
        assert_eq!(gt_insertion_position(40.0, &t), 11);
        assert_eq!(gt_insertion_position(15.0, &t), 6);
        assert_eq!(gt_insertion_position(13.5, &t), 4);
    }

    #[test]
    fn gaussian_examples() {
        let narrow = gaussian_target(4, 0.05, 10).unwrap();
        assert!(narrow.probs[4] > 0.999);
        let mid = gaussian_target(5, 2.0, 11).unwrap();
        assert!((mid.probs[4] - mid.probs[6]).abs() < 1e-15);
        let edge = gaussian_target(0, 2.0, 12).unwrap();
        assert!((edge.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(edge.probs.windows(2).all(|w| w[0] > w[1]));
        assert!(gaussian_target(0, 0.0, 3).is_err());
    }

    #[test]
    fn sigma_conversion() {
        assert_eq!(sigma_from_mm(5.0, 1.0), 5.0);
        assert_eq!(sigma_from_mm(5.0, 5.0), 1.0);
        assert_eq!(sigma_from_mm(5.0, 2.5), 2.0);
    }
}
