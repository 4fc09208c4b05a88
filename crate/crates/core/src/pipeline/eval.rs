use serde::{Deserialize, Serialize};

use super::model::match_pair;
use super::ModelParams;
use crate::assignment::{Match, MatchSet};
use crate::error::{Error, Result};
use crate::featio::{generate_pair, FeatureSet, GroundTruth, SynthConfig};
use crate::tensor::matmul_nt;

/// Default nearest-neighbor ratio-test threshold.
pub const DEFAULT_RATIO: f64 = 0.8;

#[derive(Clone, Debug)]
pub struct EvalPair {
    pub a: FeatureSet,
    pub b: FeatureSet,
    pub gt: GroundTruth,
}

/// `count` synthetic pairs with consecutive seeds starting at `cfg.rng_seed`.
pub fn synthetic_pairs(cfg: &SynthConfig, count: usize) -> Result<Vec<EvalPair>> {
    (0..count as u64)
        .map(|k| {
            let (a, b, gt) = generate_pair(&cfg.with_seed(cfg.rng_seed.wrapping_add(k)))?;
            Ok(EvalPair { a, b, gt })
        })
        .collect()
}

/// Averages over pairs. A pair without predictions contributes precision 0
/// and is counted in `empty_pairs`; pairs without ground-truth inliers are
/// left out of `recall`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub precision: f64,
    pub matching_score: f64,
    pub recall: f64,
    pub mean_matches: f64,
    pub pairs: usize,
    pub empty_pairs: usize,
}

impl EvalMetrics {
    /// True when at least one pair had predictions to score.
    pub fn precision_defined(&self) -> bool {
        self.empty_pairs < self.pairs
    }
}

pub fn score_matches(pairs: &[EvalPair], predictions: &[MatchSet]) -> Result<EvalMetrics> {
    if pairs.is_empty() {
        return Err(Error::config("evaluation needs at least one pair"));
    }
    if pairs.len() != predictions.len() {
        return Err(Error::config(format!(
            "{} pairs but {} match sets",
            pairs.len(),
            predictions.len()
        )));
    }
    let (mut precision, mut ms, mut recall, mut count) = (0.0, 0.0, 0.0, 0.0);
    let (mut empty, mut recall_pairs) = (0, 0);
    for (p, m) in pairs.iter().zip(predictions) {
        let correct = m
            .pairs
            .iter()
            .filter(|x| p.gt.is_correct(&p.a, x.i, &p.b, x.j))
            .count() as f64;
        if m.is_empty() {
            empty += 1;
        } else {
            precision += correct / m.len() as f64;
        }
        ms += correct / p.a.len() as f64;
        if !p.gt.inlier_pairs.is_empty() {
            let found = p
                .gt
                .inlier_pairs
                .iter()
                .filter(|&&(i, j)| m.pairs.iter().any(|x| x.i == i && x.j == j))
                .count();
            recall += found as f64 / p.gt.inlier_pairs.len() as f64;
            recall_pairs += 1;
        }
        count += m.len() as f64;
    }
    let n = pairs.len() as f64;
    Ok(EvalMetrics {
        precision: precision / n,
        matching_score: ms / n,
        recall: if recall_pairs == 0 { 0.0 } else { recall / recall_pairs as f64 },
        mean_matches: count / n,
        pairs: pairs.len(),
        empty_pairs: empty,
    })
}

pub fn evaluate(params: &ModelParams, pairs: &[EvalPair]) -> Result<EvalMetrics> {
    let predictions = pairs
        .iter()
        .map(|p| match_pair(params, &p.a, &p.b).map(|(_, m)| m))
        .collect::<Result<Vec<_>>>()?;
    score_matches(pairs, &predictions)
}

/// Mutual nearest neighbors by descriptor similarity, kept when the best
/// distance is at most `ratio` times the second best (`d = √(2 − 2s)` for
/// unit vectors). The ratio test is skipped when B has a single point.
pub fn nn_baseline(a: &FeatureSet, b: &FeatureSet, ratio: f64) -> Result<MatchSet> {
    let s = matmul_nt(a.descriptors(), b.descriptors())?;
    let (n, m) = s.shape();
    let dist = |v: f64| (2.0 - 2.0 * v).max(0.0).sqrt();
    let mut col_best = vec![0usize; m];
    for (j, best) in col_best.iter_mut().enumerate() {
        for i in 1..n {
            if s.get(i, j) > s.get(*best, j) {
                *best = i;
            }
        }
    }
    let mut pairs = Vec::new();
    for i in 0..n {
        let row = s.row(i);
        let mut best = 0;
        for j in 1..m {
            if row[j] > row[best] {
                best = j;
            }
        }
        if col_best[best] != i {
            continue;
        }
        if m >= 2 {
            let second = (0..m)
                .filter(|&j| j != best)
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if dist(row[best]) > ratio * dist(second) {
                continue;
            }
        }
        pairs.push(Match {
            i,
            j: best,
            confidence: row[best],
        });
    }
    Ok(MatchSet {
        pairs,
        n_a: n,
        n_b: m,
    })
}

pub fn evaluate_baseline(pairs: &[EvalPair], ratio: f64) -> Result<EvalMetrics> {
    let predictions = pairs
        .iter()
        .map(|p| nn_baseline(&p.a, &p.b, ratio))
        .collect::<Result<Vec<_>>>()?;
    score_matches(pairs, &predictions)
}
