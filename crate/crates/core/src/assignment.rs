//! Final correlation, dustbin-augmented log-domain Sinkhorn, match
//! extraction and the matching loss.
//!
//! The augmented problem has `N_A + 1` rows and `N_B + 1` columns. Interior
//! rows and columns carry unit mass, the dustbin row carries `N_B` and the
//! dustbin column `N_A`, so both sides total `N_A + N_B`. Probabilities are
//! reported after multiplying the plan by that total, which makes every
//! interior row (dustbin entry included) sum to one.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::{Backend, Eager};
use crate::error::{Error, Result};
use crate::featio::GroundTruth;
use crate::nn::{Linear, ParamStore};
use crate::tensor::Tensor2;

/// Default confidence threshold for a match.
pub const MATCH_THRESHOLD: f64 = 0.2;

/// `W_L(x_a) · W_L(x_b)ᵀ`
pub fn correlation<B: Backend>(
    b: &mut B,
    store: &ParamStore,
    w_l: &Linear,
    xa: &B::Var,
    xb: &B::Var,
) -> Result<B::Var> {
    let (sa, sb) = (b.value(xa).shape(), b.value(xb).shape());
    if sa.1 != w_l.in_dim || sb.1 != w_l.in_dim {
        return Err(Error::shape("correlation", sa, sb));
    }
    let pa = w_l.forward(b, store, xa)?;
    let pb = w_l.forward(b, store, xb)?;
    b.matmul_nt(&pa, &pb)
}

/// Log assignment probabilities, `(N_A+1) × (N_B+1)`, after `iters` rounds of
/// row then column normalization.
pub fn log_sinkhorn<B: Backend>(
    b: &mut B,
    scores: &B::Var,
    dustbin: &B::Var,
    iters: usize,
) -> Result<B::Var> {
    if iters == 0 {
        return Err(Error::config("sinkhorn needs at least one iteration"));
    }
    let s = b.value(scores);
    if !s.is_finite() {
        return Err(Error::NonFinite("assignment scores".into()));
    }
    if !b.value(dustbin).is_finite() {
        return Err(Error::NonFinite("dustbin score".into()));
    }
    let (n, m) = s.shape();
    let norm = -((n + m) as f64).ln();
    let log_mu = Tensor2::from_fn(n + 1, 1, |i, _| {
        if i < n {
            norm
        } else {
            (m as f64).ln() + norm
        }
    });
    let log_nu = Tensor2::from_fn(1, m + 1, |_, j| {
        if j < m {
            norm
        } else {
            (n as f64).ln() + norm
        }
    });
    let z = b.augment(scores, dustbin)?;
    let mut u = b.constant(Tensor2::zeros(n + 1, 1));
    let mut v = b.constant(Tensor2::zeros(1, m + 1));
    for _ in 0..iters {
        let zv = b.add_row(&z, &v)?;
        let lr = b.lse_rows(&zv);
        u = b.const_sub(log_mu.clone(), &lr)?;
        let zu = b.add_col(&z, &u)?;
        let lc = b.lse_cols(&zu);
        v = b.const_sub(log_nu.clone(), &lc)?;
    }
    let zu = b.add_col(&z, &u)?;
    let zuv = b.add_row(&zu, &v)?;
    Ok(b.shift(&zuv, -norm))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub probs: Tensor2,
    pub log_probs: Tensor2,
    pub iterations_run: usize,
}

impl Assignment {
    pub fn from_log_probs(log_probs: Tensor2, iterations_run: usize) -> Self {
        Self {
            probs: log_probs.map(f64::exp),
            log_probs,
            iterations_run,
        }
    }

    pub fn n_a(&self) -> usize {
        self.probs.rows() - 1
    }

    pub fn n_b(&self) -> usize {
        self.probs.cols() - 1
    }

    /// Total absolute deviation of all row and column sums from their
    /// target marginals.
    pub fn marginal_residual(&self) -> f64 {
        let (n, m) = (self.n_a(), self.n_b());
        let p = &self.probs;
        let rows: f64 = (0..=n)
            .map(|i| {
                let target = if i < n { 1.0 } else { m as f64 };
                (p.row(i).iter().sum::<f64>() - target).abs()
            })
            .sum();
        let cols: f64 = (0..=m)
            .map(|j| {
                let target = if j < m { 1.0 } else { n as f64 };
                ((0..=n).map(|i| p.get(i, j)).sum::<f64>() - target).abs()
            })
            .sum();
        rows + cols
    }
}

pub fn sinkhorn(scores: &Tensor2, dustbin: f64, iters: usize) -> Result<Assignment> {
    let mut e = Eager::new();
    let s = e.constant(scores.clone());
    let z = e.constant(Tensor2::scalar(dustbin));
    let lp = log_sinkhorn(&mut e, &s, &z, iters)?;
    Ok(Assignment::from_log_probs(e.value(&lp).clone(), iters))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub i: usize,
    pub j: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
    pub n_a: usize,
    pub n_b: usize,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn matched_a(&self) -> Vec<bool> {
        let mut f = vec![false; self.n_a];
        self.pairs.iter().for_each(|m| f[m.i] = true);
        f
    }

    pub fn matched_b(&self) -> Vec<bool> {
        let mut f = vec![false; self.n_b];
        self.pairs.iter().for_each(|m| f[m.j] = true);
        f
    }

    pub fn mean_confidence(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().map(|m| m.confidence).sum::<f64>() / self.pairs.len() as f64
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in values.enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

/// Keeps `(i, j)` when its probability reaches `threshold` and is the largest
/// interior entry of row `i` and, with `mutual`, of column `j` too. Ties go
/// to the lower index.
pub fn extract_matches(a: &Assignment, threshold: f64, mutual: bool) -> MatchSet {
    let (n, m) = (a.n_a(), a.n_b());
    let p = &a.probs;
    let col_best: Vec<usize> = (0..m).map(|j| argmax((0..n).map(|i| p.get(i, j)))).collect();
    let mut pairs = Vec::new();
    for i in 0..n {
        let j = argmax(p.row(i)[..m].iter().copied());
        let conf = p.get(i, j);
        if conf >= threshold && (!mutual || col_best[j] == i) {
            pairs.push(Match {
                i,
                j,
                confidence: conf,
            });
        }
    }
    MatchSet {
        pairs,
        n_a: n,
        n_b: m,
    }
}

/// Mean negative log-probability of the ground-truth inliers, plus the mean
/// negative log dustbin probability of the unmatched points on each side.
pub fn matching_loss<B: Backend>(b: &mut B, log_probs: &B::Var, gt: &GroundTruth) -> Result<B::Var> {
    let shape = b.value(log_probs).shape();
    let n_a = gt.inlier_pairs.len() + gt.unmatched_a.len();
    let n_b = gt.inlier_pairs.len() + gt.unmatched_b.len();
    if shape != (n_a + 1, n_b + 1) {
        return Err(Error::shape("matching_loss", shape, (n_a + 1, n_b + 1)));
    }
    let mut cells = Vec::new();
    let mut group = |list: Vec<(usize, usize)>| {
        let w = -1.0 / list.len() as f64;
        cells.extend(list.into_iter().map(|(i, j)| (i, j, w)));
    };
    if !gt.inlier_pairs.is_empty() {
        group(gt.inlier_pairs.clone());
    }
    if !gt.unmatched_a.is_empty() {
        group(gt.unmatched_a.iter().map(|&i| (i, n_b)).collect());
    }
    if !gt.unmatched_b.is_empty() {
        group(gt.unmatched_b.iter().map(|&j| (n_a, j)).collect());
    }
    if cells.is_empty() {
        return Err(Error::config("ground truth supervises no cell"));
    }
    b.weighted_pick(log_probs, &cells)
}

/// Writes `# n_a=.. n_b=.. threshold=..` followed by one `i j confidence`
/// line per match.
pub fn write_matches(ms: &MatchSet, threshold: f64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("# n_a={} n_b={} threshold={}\n", ms.n_a, ms.n_b, threshold);
    for m in &ms.pairs {
        writeln!(out, "{} {} {}", m.i, m.j, m.confidence).expect("writing to a String");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a match file back as `(matches, threshold)`.
pub fn read_matches(path: impl AsRef<Path>) -> Result<(MatchSet, f64)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let fail = |offset: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().ok_or_else(|| fail(0, "empty match file".into()))?;
    let mut fields = [None; 3];
    for tok in header.trim_start_matches('#').split_whitespace() {
        let (key, val) = tok
            .split_once('=')
            .ok_or_else(|| fail(0, format!("bad header field {tok:?}")))?;
        let slot = match key {
            "n_a" => 0,
            "n_b" => 1,
            "threshold" => 2,
            _ => return Err(fail(0, format!("unknown header key {key:?}"))),
        };
        fields[slot] = Some(val);
    }
    let [Some(na), Some(nb), Some(th)] = fields else {
        return Err(fail(0, "header needs n_a, n_b and threshold".into()));
    };
    let bad = |what: &str| fail(0, format!("bad {what} in header"));
    let n_a: usize = na.parse().map_err(|_| bad("n_a"))?;
    let n_b: usize = nb.parse().map_err(|_| bad("n_b"))?;
    let threshold: f64 = th.parse().map_err(|_| bad("threshold"))?;
    let mut offset = header.len();
    let mut pairs = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parsed = match parts.as_slice() {
            [i, j, c] => match (i.parse::<usize>(), j.parse::<usize>(), c.parse::<f64>()) {
                (Ok(i), Ok(j), Ok(c)) if i < n_a && j < n_b => Some(Match { i, j, confidence: c }),
                _ => None,
            },
            _ => None,
        };
        pairs.push(parsed.ok_or_else(|| fail(offset, format!("bad match line {:?}", line.trim_end())))?);
        offset += line.len();
    }
    Ok((MatchSet { pairs, n_a, n_b }, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::featio::Homography;
    use crate::gradcheck::grad_check;
    use crate::tensor::{matmul_nt, Tensor2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor2 {
        Tensor2::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
    }

    /// Maximizes `Σ P·Z + H(P)` over the one-parameter family of feasible
    /// 2×2 plans `[[p, 1-p], [1-p, p]]`. The objective is concave in `p`, so
    /// bisection on the sign of its derivative finds the optimum.
    fn two_cell_oracle(s: f64, z: f64) -> f64 {
        let slope = |p: f64| s - z - 2.0 * p.ln() + 2.0 * (1.0 - p).ln();
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if slope(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn single_point_matches_two_cell_oracle() {
        for (s, z) in [(0.0, 1.0), (2.5, 1.0), (-3.0, 0.5), (4.0, -2.0)] {
            let a = sinkhorn(&Tensor2::scalar(s), z, 100).unwrap();
            let p = a.probs.get(0, 0);
            assert!((p - two_cell_oracle(s, z)).abs() < 1e-9, "s={s} z={z}");
            let closed = 1.0 / (1.0 + (-(s - z) / 2.0).exp());
            assert!((p - closed).abs() < 1e-9, "{p} vs {closed} at s={s} z={z}");
        }
    }

    #[test]
    fn uniform_scores_with_silent_dustbin() {
        let n = 5;
        let a = sinkhorn(&Tensor2::zeros(n, n), -50.0, 1000).unwrap();
        for i in 0..n {
            let row: f64 = (0..n).map(|j| a.probs.get(i, j)).sum();
            let col: f64 = (0..n).map(|j| a.probs.get(j, i)).sum();
            assert!((row - 1.0).abs() < 1e-3 && (col - 1.0).abs() < 1e-3);
            for j in 0..n {
                assert!((a.probs.get(i, j) - 1.0 / n as f64).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn converges_on_random_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let s = rand_tensor(&mut rng, 4, 6, 3.0);
            let a = sinkhorn(&s, 1.0, 100).unwrap();
            assert!(a.marginal_residual() < 1e-6, "{}", a.marginal_residual());
            // every cell but the dustbin corner is a probability
            for i in 0..5 {
                for j in 0..7 {
                    if (i, j) != (4, 6) {
                        let p = a.probs.get(i, j);
                        assert!(p > 0.0 && p < 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn residual_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let s = rand_tensor(&mut rng, 5, 7, 4.0);
            let mut prev = f64::INFINITY;
            for it in 1..=40 {
                let r = sinkhorn(&s, 0.3, it).unwrap().marginal_residual();
                assert!(r <= prev + 1e-12, "iteration {it}: {r} > {prev}");
                prev = r;
            }
        }
    }

    #[test]
    fn shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = rand_tensor(&mut rng, 4, 5, 2.0);
        let a = sinkhorn(&s, 0.7, 200).unwrap();
        let b = sinkhorn(&s.map(|v| v + 3.25), 0.7 + 3.25, 200).unwrap();
        assert!(a.probs.max_abs_diff(&b.probs) < 1e-9);
    }

    #[test]
    fn large_scores_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = rand_tensor(&mut rng, 6, 6, 1e3);
        let a = sinkhorn(&s, 1e3, 10).unwrap();
        assert!(a.probs.is_finite() && a.log_probs.is_finite());
    }

    #[test]
    fn rejects_bad_input() {
        let mut s = Tensor2::zeros(2, 2);
        assert!(matches!(sinkhorn(&s, 1.0, 0), Err(Error::Config(_))));
        s.set(0, 1, f64::NAN);
        assert!(matches!(sinkhorn(&s, 1.0, 3), Err(Error::NonFinite(_))));
    }

    #[test]
    fn correlation_cases() {
        let mut store = ParamStore::new();
        let id = Linear::from_tensors(&mut store, "wl", Tensor2::identity(3), Tensor2::zeros(1, 3));
        let mut e = Eager::new();
        let x = e.constant(Tensor2::identity(3));
        let c = correlation(&mut e, &store, &id, &x, &x).unwrap();
        assert_eq!(e.value(&c), &Tensor2::identity(3));
        let zero = e.constant(Tensor2::zeros(2, 3));
        let c = correlation(&mut e, &store, &id, &zero, &x).unwrap();
        assert!(e.value(&c).data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lin = Linear::new(&mut store, "w2", 3, 4, &mut rng);
        *store.value_mut(lin.bias) = rand_tensor(&mut rng, 1, 4, 1.0);
        let (xa, xb) = (rand_tensor(&mut rng, 2, 3, 1.0), rand_tensor(&mut rng, 5, 3, 1.0));
        let proj = |x: &Tensor2| {
            let w = store.value(lin.weight);
            let b = store.value(lin.bias);
            Tensor2::from_fn(x.rows(), 4, |i, o| {
                b.get(0, o) + (0..3).map(|k| w.get(o, k) * x.get(i, k)).sum::<f64>()
            })
        };
        let oracle = matmul_nt(&proj(&xa), &proj(&xb)).unwrap();
        let (va, vb) = (e.constant(xa), e.constant(xb));
        let c = correlation(&mut e, &store, &lin, &va, &vb).unwrap();
        assert!(e.value(&c).max_abs_diff(&oracle) < 1e-14);
        assert!(correlation(&mut e, &store, &lin, &va, &zero).is_ok());
        let wrong = e.constant(Tensor2::zeros(2, 2));
        assert!(correlation(&mut e, &store, &lin, &va, &wrong).is_err());
    }

    fn assignment_from(interior: &Tensor2) -> Assignment {
        let (n, m) = interior.shape();
        let probs = Tensor2::from_fn(n + 1, m + 1, |i, j| {
            if i < n && j < m {
                interior.get(i, j)
            } else {
                0.01
            }
        });
        Assignment {
            log_probs: probs.map(f64::ln),
            probs,
            iterations_run: 0,
        }
    }

    #[test]
    fn extraction_of_diagonal() {
        let interior = Tensor2::from_fn(4, 4, |i, j| if i == j { 0.9 } else { 0.02 });
        let ms = extract_matches(&assignment_from(&interior), MATCH_THRESHOLD, true);
        let got: Vec<(usize, usize)> = ms.pairs.iter().map(|m| (m.i, m.j)).collect();
        assert_eq!(got, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert!(ms.pairs.iter().all(|m| m.confidence == 0.9));
    }

    #[test]
    fn dustbin_mass_gives_no_matches() {
        let a = sinkhorn(&Tensor2::filled(3, 4, -30.0), 10.0, 50).unwrap();
        assert!(extract_matches(&a, MATCH_THRESHOLD, true).is_empty());
    }

    proptest! {
        #[test]
        fn extraction_is_mutual_argmax(vals in prop::collection::vec(0.0f64..1.0, 30), th in 0.0f64..0.6) {
            let interior = Tensor2::from_fn(5, 6, |i, j| vals[i * 6 + j]);
            let ms = extract_matches(&assignment_from(&interior), th, true);
            let mut expected = Vec::new();
            for i in 0..5 {
                for j in 0..6 {
                    let v = interior.get(i, j);
                    let row_best = (0..6).all(|k| interior.get(i, k) < v || (interior.get(i, k) == v && k >= j));
                    let col_best = (0..5).all(|k| interior.get(k, j) < v || (interior.get(k, j) == v && k >= i));
                    if row_best && col_best && v >= th {
                        expected.push((i, j));
                    }
                }
            }
            let got: Vec<(usize, usize)> = ms.pairs.iter().map(|m| (m.i, m.j)).collect();
            prop_assert_eq!(&got, &expected);
            let mut js: Vec<usize> = got.iter().map(|p| p.1).collect();
            js.sort_unstable();
            js.dedup();
            prop_assert_eq!(js.len(), got.len());
        }
    }

    fn gt(pairs: Vec<(usize, usize)>, n_a: usize, n_b: usize) -> GroundTruth {
        GroundTruth::from_pairs(Homography::identity(), pairs, n_a, n_b).unwrap()
    }

    fn loss_value(log_probs: &Tensor2, g: &GroundTruth) -> Result<f64> {
        let mut e = Eager::new();
        let lp = e.constant(log_probs.clone());
        let l = matching_loss(&mut e, &lp, g)?;
        Ok(e.value(&l).get(0, 0))
    }

    #[test]
    fn loss_values() {
        let g = gt(vec![(0, 1), (1, 0)], 3, 3);
        assert_eq!(loss_value(&Tensor2::zeros(4, 4), &g).unwrap(), 0.0);

        let n = 4;
        let full = gt((0..n).map(|i| (i, i)).collect(), n, n);
        let uniform = Tensor2::filled(n + 1, n + 1, -((n + 1) as f64).ln());
        let l = loss_value(&uniform, &full).unwrap();
        assert!((l - ((n + 1) as f64).ln()).abs() < 1e-14);
        // three supervised groups each contribute the same mean
        let l = loss_value(&Tensor2::filled(4, 4, -((n + 1) as f64).ln()), &g).unwrap();
        assert!((l - 3.0 * ((n + 1) as f64).ln()).abs() < 1e-14);

        assert!(loss_value(&Tensor2::zeros(3, 3), &g).is_err());
        let empty = GroundTruth {
            homography: Homography::identity(),
            inlier_pairs: vec![],
            unmatched_a: vec![],
            unmatched_b: vec![],
        };
        assert!(matches!(loss_value(&Tensor2::zeros(1, 1), &empty), Err(Error::Config(_))));
    }

    #[test]
    fn loss_gradient_through_sinkhorn() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let w_l = Linear::new(&mut store, "wl", 4, 4, &mut rng);
        let dustbin = store.add("dustbin", Tensor2::scalar(1.0));
        let g = gt(vec![(0, 2), (2, 0)], 3, 4);
        let inputs = [
            ("xa".to_string(), rand_tensor(&mut rng, 3, 4, 1.0)),
            ("xb".to_string(), rand_tensor(&mut rng, 4, 4, 1.0)),
        ];
        let report = grad_check(
            &store,
            &inputs,
            |t: &mut Tape, s, v| {
                let sc = correlation(t, s, &w_l, &v[0], &v[1])?;
                let z = t.param(s, dustbin);
                let lp = log_sinkhorn(t, &sc, &z, 10)?;
                matching_loss(t, &lp, &g)
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn match_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        let ms = MatchSet {
            pairs: vec![
                Match { i: 0, j: 3, confidence: 0.912345678901234 },
                Match { i: 2, j: 1, confidence: 0.25 },
            ],
            n_a: 3,
            n_b: 4,
        };
        write_matches(&ms, 0.2, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# n_a=3 n_b=4 threshold=0.2\n0 3 0.912345678901234\n"));
        assert_eq!(read_matches(&path).unwrap(), (ms, 0.2));
        std::fs::write(&path, "# n_a=3 n_b=4 threshold=0.2\n0 3 0.5\n9 1 0.5\n").unwrap();
        match read_matches(&path) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 36),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
