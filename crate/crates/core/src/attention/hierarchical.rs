use std::collections::BTreeMap;

use serde::Serialize;

use super::{filtering_attention, AttentionInput, AttentionOutcome, CombineMode, RowRole};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HierarchicalOutcome<T> {
    /// Combined result. Its rows are the union of the batch contexts; a row shared by
    /// several batches (the query side) carries the weight-averaged sum of its weights.
    pub combined: AttentionOutcome<T>,
    /// Inter-batch weights, one per batch, summing to one.
    pub batch_weights: Vec<T>,
    pub per_batch: Vec<AttentionOutcome<T>>,
}

/// Intra-batch filtering attention on each `batch ∪ query` view, then a weighted sum of
/// the batch outputs. A batch's weight is its share of `sum_j exp(s_j)` over its
/// unmasked scores.
///
/// Every batch sum is rescaled by one shared maximum score before normalizing, which
/// leaves the ratios unchanged and keeps the exponentials finite.
pub fn hierarchical_attention<T: Scalar>(
    batches: &[AttentionInput<'_, T>],
    p: f64,
    combine: CombineMode,
) -> Result<HierarchicalOutcome<T>> {
    if batches.is_empty() {
        return Err(Error::InvalidArgument("hierarchical attention needs >= 1 batch".into()));
    }
    let per_batch = batches
        .iter()
        .map(|b| filtering_attention(b, p))
        .collect::<Result<Vec<_>>>()?;

    let mass = |o: &AttentionOutcome<T>| match combine {
        CombineMode::AllScores => o.exp_sum,
        CombineMode::DemoOnly => o.demo_exp_sum,
    };
    let global_max = per_batch
        .iter()
        .map(|o| o.score_max)
        .fold(T::neg_infinity(), T::max);
    let sums: Vec<T> = per_batch
        .iter()
        .map(|o| mass(o) * (o.score_max - global_max).exp())
        .collect();
    let total: T = sums.iter().copied().sum();
    if !(total > T::zero()) {
        return Err(Error::NonFinite("inter-batch weight normalizer"));
    }
    let batch_weights: Vec<T> = sums.iter().map(|&s| s / total).collect();

    let mut output: Vec<T> = per_batch[0].output.iter().map(|&x| x * batch_weights[0]).collect();
    for (o, &w) in per_batch.iter().zip(&batch_weights).skip(1) {
        for (acc, &x) in output.iter_mut().zip(&o.output) {
            *acc = *acc + x * w;
        }
    }

    let mut merged: BTreeMap<usize, (RowRole, T, T, bool)> = BTreeMap::new();
    let mut lambda = T::zero();
    for (o, &w) in per_batch.iter().zip(&batch_weights) {
        lambda = lambda + o.lambda * w;
        for i in 0..o.rows.len() {
            let entry = merged
                .entry(o.rows[i])
                .or_insert((o.roles[i], o.scores[i], T::zero(), true));
            entry.2 = entry.2 + o.weights[i] * w;
            entry.3 &= o.masked[i];
        }
    }
    let mut combined = AttentionOutcome {
        output,
        rows: Vec::with_capacity(merged.len()),
        roles: Vec::with_capacity(merged.len()),
        scores: Vec::with_capacity(merged.len()),
        weights: Vec::with_capacity(merged.len()),
        masked: Vec::with_capacity(merged.len()),
        lambda,
        score_max: global_max,
        exp_sum: total,
        demo_exp_sum: per_batch
            .iter()
            .map(|o| o.demo_exp_sum * (o.score_max - global_max).exp())
            .sum(),
        capped: per_batch.iter().any(|o| o.capped),
    };
    for (row, (role, score, weight, masked)) in merged {
        combined.rows.push(row);
        combined.roles.push(role);
        combined.scores.push(score);
        combined.weights.push(weight);
        combined.masked.push(masked);
    }
    Ok(HierarchicalOutcome {
        combined,
        batch_weights,
        per_batch,
    })
}
