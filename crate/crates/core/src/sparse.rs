//! KNN neighbor mining over bypass scores and neighborhood-restricted
//! attention.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{attend_over, AttentionParams, Attended};
use crate::autodiff::Backend;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor2;

/// Which bypass score a neighbor table was mined from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreSource {
    Position,
    Descriptor,
}

/// `n_queries × k` table of key indices. Each row holds distinct indices in
/// `[0, n_keys)`, ordered by decreasing score.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    indices: Arc<[usize]>,
    n_queries: usize,
    n_keys: usize,
    k: usize,
    source: ScoreSource,
}

impl NeighborIndex {
    /// Validates the table; panics on a malformed row since that can only be
    /// a mining bug.
    pub fn from_rows(rows: Vec<Vec<usize>>, n_keys: usize, source: ScoreSource) -> Self {
        let k = rows.first().map_or(0, |r| r.len());
        let n_queries = rows.len();
        let mut flat = Vec::with_capacity(n_queries * k);
        for r in &rows {
            assert_eq!(r.len(), k, "ragged neighbor table");
            for (t, &j) in r.iter().enumerate() {
                assert!(j < n_keys, "neighbor index {j} out of range {n_keys}");
                assert!(!r[..t].contains(&j), "duplicate neighbor {j}");
            }
            flat.extend_from_slice(r);
        }
        Self {
            indices: flat.into(),
            n_queries,
            n_keys,
            k,
            source,
        }
    }

    /// Every key for every query, in index order.
    pub fn dense(n_queries: usize, n_keys: usize, source: ScoreSource) -> Self {
        let flat: Vec<usize> = (0..n_queries).flat_map(|_| 0..n_keys).collect();
        Self {
            indices: flat.into(),
            n_queries,
            n_keys,
            k: n_keys,
            source,
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn source(&self) -> ScoreSource {
        self.source
    }
}

/// Top-`k` columns of every row of `scores`; ties go to the lower index.
pub fn knn_mine(scores: &Tensor2, k: usize, source: ScoreSource) -> Result<NeighborIndex> {
    let n_keys = scores.cols();
    if k == 0 || k > n_keys {
        return Err(Error::config(format!(
            "cannot mine {k} neighbors among {n_keys} keys"
        )));
    }
    let mut flat = Vec::with_capacity(scores.rows() * k);
    let mut order: Vec<usize> = Vec::with_capacity(n_keys);
    for i in 0..scores.rows() {
        let row = scores.row(i);
        order.clear();
        order.extend(0..n_keys);
        let by_score = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
        if k < n_keys {
            order.select_nth_unstable_by(k - 1, by_score);
            order.truncate(k);
        }
        order.sort_unstable_by(by_score);
        flat.extend_from_slice(&order);
    }
    Ok(NeighborIndex {
        indices: flat.into(),
        n_queries: scores.rows(),
        n_keys,
        k,
        source,
    })
}

/// Whether neighbors are mined from the initial or the adjusted bypass scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MiningStage {
    PreAdjust,
    PostAdjust,
}

/// `(k_self, k_cross)` for a stage: `(k, k/2)` before the mid-network
/// adjustment and `(k, k/4)` after it.
pub fn neighbor_budgets(stage: MiningStage, k: usize) -> Result<(usize, usize)> {
    if k == 0 || k % 4 != 0 {
        return Err(Error::config(format!(
            "neighbor budget k={k} must be a positive multiple of 4"
        )));
    }
    Ok(match stage {
        MiningStage::PreAdjust => (k, k / 2),
        MiningStage::PostAdjust => (k, k / 4),
    })
}

/// Attention where query `i` only sees keys `neighbors.row(i)`. Each
/// `bypass[h]` is `N_q × k`, aligned with the neighbor table (see
/// [`Backend::gather_cols`]). Neighbor selection itself is a constant of the
/// pass; gradients flow through every gathered value.
#[allow(clippy::too_many_arguments)]
pub fn sparse_attend<B: Backend>(
    b: &mut B,
    store: &ParamStore,
    params: &AttentionParams,
    x: &B::Var,
    y: &B::Var,
    bypass: Option<&[B::Var]>,
    neighbors: &NeighborIndex,
    capture: bool,
) -> Result<Attended<B::Var>> {
    attend_over(b, store, params, x, y, bypass, Some(neighbors), capture)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::attend;
    use crate::attention::tests::{block, brute_force, rand_tensor};
    use crate::autodiff::{Eager, Tape};
    use crate::gradcheck::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_sparse(
        store: &ParamStore,
        p: &AttentionParams,
        x: &Tensor2,
        y: &Tensor2,
        bypass: Option<&[Tensor2]>,
        idx: &NeighborIndex,
    ) -> (Tensor2, Vec<Tensor2>) {
        let mut e = Eager::new();
        let xv = e.constant(x.clone());
        let yv = e.constant(y.clone());
        let bp: Option<Vec<_>> = bypass.map(|s| {
            s.iter()
                .map(|t| {
                    let full = e.constant(t.clone());
                    e.gather_cols(&full, idx).unwrap()
                })
                .collect()
        });
        let a = sparse_attend(&mut e, store, p, &xv, &yv, bp.as_deref(), idx, true).unwrap();
        let w = a.weights.iter().map(|w| e.value(w).clone()).collect();
        (e.value(&a.out).clone(), w)
    }

    #[test]
    fn full_neighborhood_equals_dense() {
        let (store, p) = block(8, 4, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = rand_tensor(&mut rng, 6, 8);
        let y = rand_tensor(&mut rng, 7, 8);
        let bp: Vec<Tensor2> = (0..4).map(|_| rand_tensor(&mut rng, 6, 7)).collect();
        let dense = crate::attention::attend_tensors(&store, &p, &x, &y, Some(&bp)).unwrap();
        // any ordering of all keys is the same neighborhood
        let idx = knn_mine(&rand_tensor(&mut rng, 6, 7), 7, ScoreSource::Descriptor).unwrap();
        let (out, _) = run_sparse(&store, &p, &x, &y, Some(&bp), &idx);
        assert!(out.max_abs_diff(&dense) < 1e-10);
        let all = NeighborIndex::dense(6, 7, ScoreSource::Descriptor);
        let (out, _) = run_sparse(&store, &p, &x, &y, Some(&bp), &all);
        assert!(out.max_abs_diff(&dense) < 1e-10);
    }

    #[test]
    fn single_neighbor_gets_all_the_weight() {
        let (store, p) = block(8, 2, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x = rand_tensor(&mut rng, 5, 8);
        let s = rand_tensor(&mut rng, 5, 5);
        let idx = knn_mine(&s, 1, ScoreSource::Position).unwrap();
        let (out, w) = run_sparse(&store, &p, &x, &x, Some(&[s.clone(), s.clone()]), &idx);
        for wh in &w {
            assert!(wh.data().iter().all(|&v| v == 1.0));
        }
        let mask = |i: usize, j: usize| idx.row(i)[0] == j;
        let oracle = brute_force(&store, &p, &x, &x, None, Some(&mask));
        assert!(out.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn matches_masked_dense_oracle() {
        let (store, p) = block(8, 2, 34);
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let x = rand_tensor(&mut rng, 8, 8);
        let y = rand_tensor(&mut rng, 8, 8);
        let s = rand_tensor(&mut rng, 8, 8);
        let bp = [s.map(|v| 2.0 * v), s.map(|v| -0.5 * v)];
        let idx = knn_mine(&s, 4, ScoreSource::Descriptor).unwrap();
        let (out, w) = run_sparse(&store, &p, &x, &y, Some(&bp), &idx);
        let mask = |i: usize, j: usize| idx.row(i).contains(&j);
        let oracle = brute_force(&store, &p, &x, &y, Some(&bp), Some(&mask));
        assert!(out.max_abs_diff(&oracle) < 1e-12);
        for wh in &w {
            assert_eq!(wh.shape(), (8, 4));
            for i in 0..8 {
                assert!((wh.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bad_index_shape_is_rejected() {
        let (store, p) = block(8, 2, 36);
        let mut e = Eager::new();
        let x = e.constant(Tensor2::zeros(3, 8));
        let idx = NeighborIndex::dense(4, 3, ScoreSource::Position);
        assert!(sparse_attend(&mut e, &store, &p, &x, &x, None, &idx, false).is_err());
    }

    fn block_macs(n: usize, k: Option<usize>) -> u64 {
        let (store, p) = block(8, 2, 37);
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let mut e = Eager::new();
        let x = e.constant(rand_tensor(&mut rng, n, 8));
        let before = e.macs();
        match k {
            None => {
                attend(&mut e, &store, &p, &x, &x, None, false).unwrap();
            }
            Some(k) => {
                let idx = NeighborIndex::from_rows(
                    (0..n).map(|i| (0..k).map(|t| (i + t) % n).collect()).collect(),
                    n,
                    ScoreSource::Position,
                );
                sparse_attend(&mut e, &store, &p, &x, &x, None, &idx, false).unwrap();
            }
        }
        e.macs() - before
    }

    #[test]
    fn multiply_accumulate_scaling() {
        for n in [256, 512, 1024] {
            let sparse = block_macs(2 * n, Some(16)) as f64 / block_macs(n, Some(16)) as f64;
            let dense = block_macs(2 * n, None) as f64 / block_macs(n, None) as f64;
            assert!(sparse <= 2.2, "sparse ratio {sparse} at N={n}");
            assert!(dense >= 3.5, "dense ratio {dense} at N={n}");
        }
    }

    #[test]
    fn gradient_check_through_gathered_bypass() {
        let (store, p) = block(8, 2, 39);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let s = rand_tensor(&mut rng, 4, 5);
        let idx = knn_mine(&s, 3, ScoreSource::Descriptor).unwrap();
        let inputs = [
            ("x".to_string(), rand_tensor(&mut rng, 4, 8)),
            ("y".to_string(), rand_tensor(&mut rng, 5, 8)),
            ("bypass".to_string(), s),
        ];
        let w = rand_tensor(&mut rng, 4, 8);
        let report = grad_check(
            &store,
            &inputs,
            |t: &mut Tape, st, v| {
                let g = t.gather_cols(&v[2], &idx)?;
                let h1 = t.scale(&g, 0.7);
                let bp = [g, h1];
                let out = sparse_attend(t, st, &p, &v[0], &v[1], Some(&bp), &idx, false)?.out;
                t.dot_const(&out, &w)
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn top_two() {
        let s = Tensor2::from_rows(&[[3.0, 1.0, 2.0]]);
        let idx = knn_mine(&s, 2, ScoreSource::Position).unwrap();
        assert_eq!(idx.row(0), &[0, 2]);
    }

    #[test]
    fn full_k_sorted_by_score() {
        let s = Tensor2::from_rows(&[[0.5, 4.0, -1.0, 2.0]]);
        let idx = knn_mine(&s, 4, ScoreSource::Descriptor).unwrap();
        assert_eq!(idx.row(0), &[1, 3, 0, 2]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let s = Tensor2::from_rows(&[[5.0, 5.0, 1.0]]);
        assert_eq!(knn_mine(&s, 1, ScoreSource::Position).unwrap().row(0), &[0]);
        let s = Tensor2::from_rows(&[[1.0, 7.0, 7.0, 7.0]]);
        assert_eq!(knn_mine(&s, 2, ScoreSource::Position).unwrap().row(0), &[1, 2]);
    }

    #[test]
    fn k_too_large() {
        let s = Tensor2::zeros(2, 3);
        assert!(matches!(
            knn_mine(&s, 4, ScoreSource::Position),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn budgets() {
        assert_eq!(neighbor_budgets(MiningStage::PreAdjust, 64).unwrap(), (64, 32));
        assert_eq!(neighbor_budgets(MiningStage::PostAdjust, 64).unwrap(), (64, 16));
        assert_eq!(neighbor_budgets(MiningStage::PreAdjust, 8).unwrap(), (8, 4));
        assert!(neighbor_budgets(MiningStage::PreAdjust, 10).is_err());
    }

    proptest! {
        #[test]
        fn mining_commutes_with_column_permutation(
            vals in prop::collection::vec(-100i32..100, 12),
            k in 1usize..=6,
            rot in 0usize..6,
        ) {
            // 2 x 6 table with distinct-enough integer scores
            let s = Tensor2::from_fn(2, 6, |r, c| vals[r * 6 + c] as f64 + c as f64 * 1e-3);
            let perm: Vec<usize> = (0..6).map(|j| (j + rot) % 6).collect();
            // permuted[:, j] = s[:, perm[j]]
            let p = Tensor2::from_fn(2, 6, |r, j| s.get(r, perm[j]));
            let a = knn_mine(&s, k, ScoreSource::Position).unwrap();
            let b = knn_mine(&p, k, ScoreSource::Position).unwrap();
            for r in 0..2 {
                let mapped: Vec<usize> = b.row(r).iter().map(|&j| perm[j]).collect();
                prop_assert_eq!(mapped, a.row(r).to_vec());
            }
        }

        #[test]
        fn rows_are_distinct_and_in_range(vals in prop::collection::vec(-3i32..3, 15), k in 1usize..=5) {
            let s = Tensor2::from_fn(3, 5, |r, c| vals[r * 5 + c] as f64);
            let idx = knn_mine(&s, k, ScoreSource::Descriptor).unwrap();
            for r in 0..3 {
                let row = idx.row(r);
                prop_assert_eq!(row.len(), k);
                for (t, &j) in row.iter().enumerate() {
                    prop_assert!(j < 5);
                    prop_assert!(!row[..t].contains(&j));
                }
                // nothing outside the row beats the weakest member
                let weakest = s.get(r, row[k - 1]);
                for j in 0..5 {
                    if !row.contains(&j) {
                        prop_assert!(s.get(r, j) <= weakest);
                    }
                }
            }
        }
    }
}
