//! Embedding-space evaluation: geometry statistics and pair verification.

use serde::{Deserialize, Serialize};

use crate::data::{LongTailDataset, VerificationPair};
use crate::error::{Error, Result};
use crate::geometry::{min_center_pair, sq_distance, top_k_ranges, EmbeddingBatch};
use crate::network::{embed, MlpParams};

/// Mean largest intra-class range and smallest inter-center distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryMetrics {
    pub mean_intra_range: f64,
    pub min_center_sq: f64,
}

/// Geometry of an already-embedded labelled set. Every identity needs at
/// least two samples and there must be at least two identities.
pub fn embedding_geometry(batch: &EmbeddingBatch<f64>) -> Result<GeometryMetrics> {
    if batch.num_identities() < 2 {
        return Err(Error::invalid("geometry metrics need at least 2 identities"));
    }
    let mut total = 0.0;
    for &id in batch.groups().keys() {
        let rows = batch.group_vectors(id);
        if rows.len() < 2 {
            return Err(Error::invalid(format!(
                "identity {id} has {} eval sample(s), need at least 2",
                rows.len()
            )));
        }
        total += top_k_ranges(&rows, 1)?.ranges[0];
    }
    Ok(GeometryMetrics {
        mean_intra_range: total / batch.num_identities() as f64,
        min_center_sq: min_center_pair(batch)?.sq_distance,
    })
}

/// Embeds `dataset` with `params` and measures its geometry.
pub fn geometry_metrics(params: &MlpParams<f64>, dataset: &LongTailDataset) -> Result<GeometryMetrics> {
    let emb = embed(params, dataset.inputs())?;
    embedding_geometry(&EmbeddingBatch::new(emb, dataset.labels().to_vec())?)
}

/// Equally spaced thresholds from `min` to `max` inclusive.
pub fn threshold_grid(min: f64, max: f64, n_thresholds: usize) -> Vec<f64> {
    match n_thresholds {
        0 => Vec::new(),
        1 => vec![min],
        n => (0..n)
            .map(|i| if i == n - 1 { max } else { min + (max - min) * i as f64 / (n - 1) as f64 })
            .collect(),
    }
}

/// Best accuracy of the rule `same <=> distance <= t` over the threshold
/// grid, also counting the rule that rejects every pair.
pub fn best_threshold_accuracy(distances: &[f64], same: &[bool], n_thresholds: usize) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::invalid("verification needs at least one pair"));
    }
    if distances.len() != same.len() {
        return Err(Error::DimensionMismatch {
            expected: distances.len(),
            found: same.len(),
        });
    }
    if n_thresholds == 0 {
        return Err(Error::invalid("n_thresholds must be >= 1"));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("non-finite pair distance"));
    }
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let max = distances.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]));
    let n_neg = same.iter().filter(|&&s| !s).count();

    // sweep ascending thresholds; everything at or below t is accepted
    let mut correct_best = n_neg;
    let (mut accepted_pos, mut accepted_neg, mut cursor) = (0usize, 0usize, 0usize);
    for t in threshold_grid(min, max, n_thresholds) {
        while cursor < order.len() && distances[order[cursor]] <= t {
            if same[order[cursor]] {
                accepted_pos += 1;
            } else {
                accepted_neg += 1;
            }
            cursor += 1;
        }
        correct_best = correct_best.max(accepted_pos + n_neg - accepted_neg);
    }
    Ok(correct_best as f64 / distances.len() as f64)
}

/// Squared embedding distance of each pair.
pub fn pair_distances(params: &MlpParams<f64>, dataset: &LongTailDataset, pairs: &[VerificationPair]) -> Result<Vec<f64>> {
    let emb = embed(params, dataset.inputs())?;
    pairs
        .iter()
        .map(|p| {
            if p.left >= emb.rows() || p.right >= emb.rows() {
                return Err(Error::invalid(format!("pair ({}, {}) out of range", p.left, p.right)));
            }
            Ok(sq_distance(emb.row(p.left), emb.row(p.right)))
        })
        .collect()
}

/// Best-threshold verification accuracy of `params` on `pairs` drawn from
/// `dataset`.
pub fn evaluate_verification(
    params: &MlpParams<f64>,
    dataset: &LongTailDataset,
    pairs: &[VerificationPair],
    n_thresholds: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("verification needs at least one pair"));
    }
    let d = pair_distances(params, dataset, pairs)?;
    let same: Vec<bool> = pairs.iter().map(|p| p.same).collect();
    best_threshold_accuracy(&d, &same, n_thresholds)
}
