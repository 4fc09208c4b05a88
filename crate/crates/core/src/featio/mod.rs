//! Keypoint/descriptor sets, ground truth, file formats and the synthetic
//! pair generator.

mod io;
mod synth;

pub use io::{read_features, read_ground_truth, write_features, write_ground_truth, FEATURE_MAGIC, GT_MAGIC};
pub use synth::{generate_pair, Homography, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Descriptors must have unit L2 norm within this tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Correspondences closer than this (in pixels) count as correct.
pub const CORRECT_MATCH_PX: f64 = 3.0;

/// Keypoints and unit descriptors of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    width: u32,
    height: u32,
    positions: Tensor2,
    descriptors: Tensor2,
}

impl FeatureSet {
    pub fn new(width: u32, height: u32, positions: Tensor2, descriptors: Tensor2) -> Result<Self> {
        if positions.cols() != 2 {
            return Err(Error::shape("feature positions", positions.shape(), (positions.rows(), 2)));
        }
        if positions.rows() != descriptors.rows() {
            return Err(Error::shape("feature set", positions.shape(), descriptors.shape()));
        }
        if positions.rows() == 0 {
            return Err(Error::config("a feature set needs at least one keypoint"));
        }
        if descriptors.cols() == 0 {
            return Err(Error::config("descriptors need at least one channel"));
        }
        if width == 0 || height == 0 {
            return Err(Error::config("image size must be positive"));
        }
        if let Some(i) = first_out_of_bounds(width, height, &positions) {
            return Err(Error::config(format!(
                "keypoint {i} at ({}, {}) lies outside the {width}x{height} image",
                positions.get(i, 0),
                positions.get(i, 1)
            )));
        }
        if let Some(i) = first_non_unit(&descriptors) {
            return Err(Error::config(format!(
                "descriptor {i} has norm {} (expected 1)",
                row_norm(descriptors.row(i))
            )));
        }
        Ok(Self {
            width,
            height,
            positions,
            descriptors,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn positions(&self) -> &Tensor2 {
        &self.positions
    }

    pub fn descriptors(&self) -> &Tensor2 {
        &self.descriptors
    }

    pub fn position(&self, i: usize) -> (f64, f64) {
        (self.positions.get(i, 0), self.positions.get(i, 1))
    }

    /// Row `r` of the result is row `perm[r]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> FeatureSet {
        FeatureSet {
            width: self.width,
            height: self.height,
            positions: self.positions.select_rows(perm),
            descriptors: self.descriptors.select_rows(perm),
        }
    }
}

pub(crate) fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn first_non_unit(descriptors: &Tensor2) -> Option<usize> {
    (0..descriptors.rows()).find(|&i| (row_norm(descriptors.row(i)) - 1.0).abs() > UNIT_NORM_TOL)
}

pub(crate) fn first_out_of_bounds(width: u32, height: u32, positions: &Tensor2) -> Option<usize> {
    (0..positions.rows()).find(|&i| {
        let (x, y) = (positions.get(i, 0), positions.get(i, 1));
        !(x >= 0.0 && x < width as f64 && y >= 0.0 && y < height as f64)
    })
}

/// Maps pixel coordinates to the image-centred frame scaled by half the
/// longer side, so the longer axis spans `[-1, 1]`.
pub fn normalize_positions(fs: &FeatureSet) -> Tensor2 {
    let (w, h) = (fs.width as f64, fs.height as f64);
    let half = w.max(h) / 2.0;
    let p = fs.positions();
    Tensor2::from_fn(p.rows(), 2, |i, c| {
        let center = if c == 0 { w / 2.0 } else { h / 2.0 };
        (p.get(i, c) - center) / half
    })
}

/// Known correspondences between two feature sets.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub homography: Homography,
    pub inlier_pairs: Vec<(usize, usize)>,
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
}

impl GroundTruth {
    /// Derives the unmatched lists as the complement of the inlier endpoints.
    pub fn from_pairs(
        homography: Homography,
        mut inlier_pairs: Vec<(usize, usize)>,
        n_a: usize,
        n_b: usize,
    ) -> Result<Self> {
        inlier_pairs.sort_unstable();
        let mut used_a = vec![false; n_a];
        let mut used_b = vec![false; n_b];
        for &(i, j) in &inlier_pairs {
            if i >= n_a || j >= n_b {
                return Err(Error::config(format!(
                    "ground-truth pair ({i}, {j}) outside {n_a}x{n_b}"
                )));
            }
            if used_a[i] || used_b[j] {
                return Err(Error::config(format!(
                    "ground-truth pair ({i}, {j}) reuses a keypoint"
                )));
            }
            used_a[i] = true;
            used_b[j] = true;
        }
        let unmatched_a = (0..n_a).filter(|&i| !used_a[i]).collect();
        let unmatched_b = (0..n_b).filter(|&j| !used_b[j]).collect();
        Ok(Self {
            homography,
            inlier_pairs,
            unmatched_a,
            unmatched_b,
        })
    }

    /// Pixel distance between `H·p_a` and `p_b`.
    pub fn reprojection_error(&self, a: &FeatureSet, i: usize, b: &FeatureSet, j: usize) -> f64 {
        let (x, y) = self.homography.apply(a.position(i));
        let (u, v) = b.position(j);
        ((x - u).powi(2) + (y - v).powi(2)).sqrt()
    }

    pub fn is_correct(&self, a: &FeatureSet, i: usize, b: &FeatureSet, j: usize) -> bool {
        self.reprojection_error(a, i, b, j) < CORRECT_MATCH_PX
    }

    /// The same ground truth after permuting the rows of A and B
    /// (`new_a[r] = old_a[perm_a[r]]`).
    pub fn permuted(&self, perm_a: &[usize], perm_b: &[usize]) -> GroundTruth {
        let inv = |perm: &[usize]| {
            let mut inv = vec![0; perm.len()];
            for (r, &p) in perm.iter().enumerate() {
                inv[p] = r;
            }
            inv
        };
        let (ia, ib) = (inv(perm_a), inv(perm_b));
        let pairs = self.inlier_pairs.iter().map(|&(i, j)| (ia[i], ib[j])).collect();
        GroundTruth::from_pairs(self.homography, pairs, perm_a.len(), perm_b.len())
            .expect("a permutation keeps the pairing valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor2 {
        let mut t = Tensor2::from_fn(n, c, |_, _| rng.random_range(-1.0..1.0));
        for i in 0..n {
            let norm = row_norm(t.row(i));
            t.row_mut(i).iter_mut().for_each(|v| *v /= norm);
        }
        t
    }

    #[test]
    fn center_maps_to_origin() {
        let fs = FeatureSet::new(
            640,
            480,
            Tensor2::from_rows(&[[320.0, 240.0]]),
            Tensor2::from_rows(&[[1.0, 0.0]]),
        )
        .unwrap();
        assert_eq!(normalize_positions(&fs).data(), &[0.0, 0.0]);
    }

    #[test]
    fn far_corner_approaches_one() {
        let fs = FeatureSet::new(
            100,
            100,
            Tensor2::from_rows(&[[99.999, 99.999]]),
            Tensor2::from_rows(&[[1.0]]),
        )
        .unwrap();
        let p = normalize_positions(&fs);
        assert!((p.get(0, 0) - 1.0).abs() < 1e-4 && (p.get(0, 1) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn random_points_match_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (w, h) = (320u32, 200u32);
        let pos = Tensor2::from_fn(20, 2, |_, c| {
            rng.random_range(0.0..if c == 0 { w as f64 } else { h as f64 })
        });
        let desc = unit_rows(&mut rng, 20, 4);
        let fs = FeatureSet::new(w, h, pos.clone(), desc).unwrap();
        let p = normalize_positions(&fs);
        for i in 0..20 {
            assert!((p.get(i, 0) - (pos.get(i, 0) - 160.0) / 160.0).abs() < 1e-15);
            assert!((p.get(i, 1) - (pos.get(i, 1) - 100.0) / 160.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_invalid_sets() {
        let d = Tensor2::from_rows(&[[1.0, 0.0]]);
        assert!(FeatureSet::new(10, 10, Tensor2::from_rows(&[[10.0, 1.0]]), d.clone()).is_err());
        assert!(FeatureSet::new(10, 10, Tensor2::from_rows(&[[1.0, 1.0]]), Tensor2::from_rows(&[[0.5, 0.5]])).is_err());
        assert!(FeatureSet::new(10, 10, Tensor2::zeros(0, 2), Tensor2::zeros(0, 2)).is_err());
    }

    #[test]
    fn ground_truth_partition() {
        let gt = GroundTruth::from_pairs(Homography::identity(), vec![(2, 0), (0, 1)], 4, 3).unwrap();
        assert_eq!(gt.inlier_pairs, vec![(0, 1), (2, 0)]);
        assert_eq!(gt.unmatched_a, vec![1, 3]);
        assert_eq!(gt.unmatched_b, vec![2]);
        assert!(GroundTruth::from_pairs(Homography::identity(), vec![(0, 0), (0, 1)], 2, 2).is_err());
    }
}
