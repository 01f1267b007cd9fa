//! Top-k retrieval over held-out pairs.

use serde::Serialize;

use crate::error::{BenchError, Result};
use crate::model::TrainedModel;
use crate::task::Pairs;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub ks: Vec<usize>,
    /// Fraction of anchors whose own target ranks in the top `k`, per `ks`.
    pub hits: Vec<f64>,
    /// 0-based rank of each anchor's target.
    pub ranks: Vec<usize>,
}

impl EvalResult {
    pub fn hit_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.hits[i])
    }
}

/// Rank of target `i` in row `i` of a square score matrix given as rows.
/// Targets scoring strictly higher come first; equal scores are ordered by
/// index. NaN scores rank below every number, and a NaN positive ranks
/// last.
pub fn positive_ranks(rows: &[&[f64]]) -> Vec<usize> {
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let own = row[i];
            if own.is_nan() {
                return row.len() - 1;
            }
            row.iter().enumerate().filter(|&(j, &s)| s > own || (s == own && j < i)).count()
        })
        .collect()
}

pub fn hits_from_ranks(ranks: &[usize], ks: &[usize]) -> Vec<f64> {
    let n = ranks.len() as f64;
    ks.iter().map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / n).collect()
}

/// Each eval anchor retrieves among all eval targets.
pub fn evaluate_topk(model: &TrainedModel, pairs: &Pairs, ks: &[usize]) -> Result<EvalResult> {
    if pairs.is_empty() {
        return Err(BenchError::Config("evaluation set is empty".into()));
    }
    let scores = model.scores(&pairs.anchors, &pairs.targets)?;
    let rows: Vec<&[f64]> = (0..scores.rows()).map(|i| scores.row(i)).collect();
    let ranks = positive_ranks(&rows);
    Ok(EvalResult { ks: ks.to_vec(), hits: hits_from_ranks(&ranks, ks), ranks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_the_lower_index() {
        let r0 = [1.0, 1.0, 1.0];
        let r1 = [1.0, 1.0, 0.0];
        let r2 = [5.0, 0.0, 2.0];
        assert_eq!(positive_ranks(&[&r0, &r1, &r2]), vec![0, 1, 1]);
    }

    #[test]
    fn nan_scores_never_count_as_hits() {
        let nan = f64::NAN;
        let r0 = [nan, nan, nan];
        let r1 = [nan, 0.0, 1.0];
        let r2 = [nan, nan, nan];
        assert_eq!(positive_ranks(&[&r0, &r1, &r2]), vec![2, 1, 2]);
    }

    #[test]
    fn hits_are_monotone_and_saturate() {
        let ranks = [0, 3, 1, 7];
        let h = hits_from_ranks(&ranks, &[1, 2, 4, 8]);
        assert_eq!(h, vec![0.25, 0.5, 0.75, 1.0]);
    }
}
