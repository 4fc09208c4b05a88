use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureSet, GroundTruth, CORRECT_MATCH_PX};
use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Row-major 3×3 projective map from image-A pixels to image-B pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    pub fn identity() -> Self {
        Homography([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography([1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0])
    }

    /// Rotation by `angle` radians about `(cx, cy)`.
    pub fn rotation_about(angle: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Homography::translation(cx, cy)
            .then_after(&Homography([c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]))
            .then_after(&Homography::translation(-cx, -cy))
    }

    /// `self · other`: applies `other` first.
    pub fn then_after(&self, other: &Homography) -> Homography {
        let (a, b) = (&self.0, &other.0);
        let mut m = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                m[r * 3 + c] = (0..3).map(|k| a[r * 3 + k] * b[k * 3 + c]).sum();
            }
        }
        Homography(m)
    }

    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let h = &self.0;
        let w = h[6] * x + h[7] * y + h[8];
        ((h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w)
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    pub fn inverse(&self) -> Option<Homography> {
        let det = self.determinant();
        if det.abs() < 1e-12 {
            return None;
        }
        let m = &self.0;
        let adj = [
            m[4] * m[8] - m[5] * m[7],
            m[2] * m[7] - m[1] * m[8],
            m[1] * m[5] - m[2] * m[4],
            m[5] * m[6] - m[3] * m[8],
            m[0] * m[8] - m[2] * m[6],
            m[2] * m[3] - m[0] * m[5],
            m[3] * m[7] - m[4] * m[6],
            m[1] * m[6] - m[0] * m[7],
            m[0] * m[4] - m[1] * m[3],
        ];
        Some(Homography(adj.map(|v| v / det)))
    }
}

/// Parameters of the synthetic two-view generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
    pub n_points: usize,
    pub channels: usize,
    /// Per-component standard deviation of the descriptor noise.
    pub descriptor_noise_sigma: f64,
    pub outlier_fraction: f64,
    /// Degrees.
    pub max_rotation: f64,
    /// Scale is drawn log-uniformly from `[1/(1+s), 1+s]`.
    pub max_scale: f64,
    /// Fraction of the image size.
    pub max_translation: f64,
    /// Projective coefficient in units of the inverse half-size.
    pub max_perspective: f64,
    /// Standard deviation in pixels of the noise added to warped positions.
    pub position_jitter: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            n_points: 32,
            channels: 32,
            descriptor_noise_sigma: 0.3,
            outlier_fraction: 0.2,
            max_rotation: 15.0,
            max_scale: 0.1,
            max_translation: 0.1,
            max_perspective: 0.1,
            position_jitter: 0.0,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("descriptor_noise_sigma", self.descriptor_noise_sigma),
            ("max_rotation", self.max_rotation),
            ("max_scale", self.max_scale),
            ("max_translation", self.max_translation),
            ("max_perspective", self.max_perspective),
            ("position_jitter", self.position_jitter),
        ];
        for (name, v) in ranges {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(Error::config(format!(
                "outlier_fraction must lie in [0, 1], got {}",
                self.outlier_fraction
            )));
        }
        if self.n_points == 0 || self.channels == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::config("n_points, channels and image size must be positive"));
        }
        Ok(())
    }

    /// Same distribution, different seed.
    pub fn with_seed(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            rng_seed: seed,
            ..self.clone()
        }
    }
}

fn symmetric(rng: &mut impl Rng, max: f64) -> f64 {
    if max == 0.0 {
        0.0
    } else {
        rng.random_range(-max..=max)
    }
}

/// In-bounds test that also holds after the f32 rounding of the file format.
fn storable(v: f64, limit: f64) -> bool {
    v >= 0.0 && v < limit && (v as f32) < (limit as f32)
}

fn sample_coord(rng: &mut impl Rng, limit: f64) -> f64 {
    loop {
        let v = rng.random_range(0.0..limit);
        if storable(v, limit) {
            return v;
        }
    }
}

fn random_unit(rng: &mut impl Rng, c: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..c).map(|_| StandardNormal.sample(rng)).collect();
        let n = super::row_norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn perturb(rng: &mut impl Rng, base: &[f64], sigma: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = base
            .iter()
            .map(|&b| {
                let g: f64 = StandardNormal.sample(rng);
                b + sigma * g
            })
            .collect();
        let n = super::row_norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn sample_homography(rng: &mut impl Rng, cfg: &SynthConfig) -> Homography {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let (cx, cy) = (w / 2.0, h / 2.0);
    let half = w.max(h) / 2.0;
    loop {
        let angle = symmetric(rng, cfg.max_rotation).to_radians();
        let log_s = symmetric(rng, (1.0 + cfg.max_scale).ln());
        let s = log_s.exp();
        let tx = symmetric(rng, cfg.max_translation) * w;
        let ty = symmetric(rng, cfg.max_translation) * h;
        let px = symmetric(rng, cfg.max_perspective) / half;
        let py = symmetric(rng, cfg.max_perspective) / half;

        let (sn, cs) = angle.sin_cos();
        let core = Homography([s * cs, -s * sn, 0.0, s * sn, s * cs, 0.0, px, py, 1.0]);
        let hm = Homography::translation(cx + tx, cy + ty)
            .then_after(&core)
            .then_after(&Homography::translation(-cx, -cy));

        let corners = [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)];
        let positive_depth = corners.iter().all(|&(x, y)| {
            let m = &hm.0;
            m[6] * x + m[7] * y + m[8] > 0.1
        });
        if positive_depth && hm.inverse().is_some() {
            return hm;
        }
    }
}

/// Draws a homography, keypoints, descriptors and the true partition.
///
/// Matched points share a base descriptor that each image perturbs
/// independently; outliers get fresh random descriptors and positions.
/// Warped points that leave image B are dropped, leaving their A
/// counterpart unmatched. B is shuffled. Deterministic in `cfg.rng_seed`.
pub fn generate_pair(cfg: &SynthConfig) -> Result<(FeatureSet, FeatureSet, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let n = cfg.n_points;
    let c = cfg.channels;
    let n_out = (cfg.outlier_fraction * n as f64).round() as usize;
    let jitter = Normal::new(0.0, cfg.position_jitter.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::config(e.to_string()))?;

    loop {
        let hm = sample_homography(&mut rng, cfg);

        let pos_a: Vec<(f64, f64)> = (0..n)
            .map(|_| (sample_coord(&mut rng, w), sample_coord(&mut rng, h)))
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut is_outlier = vec![false; n];
        for &i in &order[..n_out] {
            is_outlier[i] = true;
        }

        let mut desc_a = Vec::with_capacity(n);
        // (position, descriptor, source index in A if labelled)
        let mut b_points: Vec<((f64, f64), Vec<f64>, Option<usize>)> = Vec::new();
        for i in 0..n {
            let base = random_unit(&mut rng, c);
            if is_outlier[i] {
                desc_a.push(base);
                continue;
            }
            desc_a.push(perturb(&mut rng, &base, cfg.descriptor_noise_sigma));
            let (mut x, mut y) = hm.apply(pos_a[i]);
            if cfg.position_jitter > 0.0 {
                x += jitter.sample(&mut rng);
                y += jitter.sample(&mut rng);
            }
            let in_bounds = storable(x, w) && storable(y, h);
            if !in_bounds {
                continue;
            }
            let db = perturb(&mut rng, &base, cfg.descriptor_noise_sigma);
            let (ex, ey) = hm.apply(pos_a[i]);
            let labelled = ((ex - x).powi(2) + (ey - y).powi(2)).sqrt() < CORRECT_MATCH_PX;
            b_points.push(((x, y), db, labelled.then_some(i)));
        }
        for _ in 0..n_out {
            let p = (sample_coord(&mut rng, w), sample_coord(&mut rng, h));
            b_points.push((p, random_unit(&mut rng, c), None));
        }
        if b_points.is_empty() {
            continue;
        }
        b_points.shuffle(&mut rng);

        let pa = Tensor2::from_fn(n, 2, |i, k| if k == 0 { pos_a[i].0 } else { pos_a[i].1 });
        let da = Tensor2::from_fn(n, c, |i, k| desc_a[i][k]);
        let nb = b_points.len();
        let pb = Tensor2::from_fn(nb, 2, |j, k| {
            let p = b_points[j].0;
            if k == 0 {
                p.0
            } else {
                p.1
            }
        });
        let db = Tensor2::from_fn(nb, c, |j, k| b_points[j].1[k]);
        let pairs: Vec<(usize, usize)> = b_points
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.2.map(|i| (i, j)))
            .collect();

        let a = FeatureSet::new(cfg.width, cfg.height, pa, da)?;
        let b = FeatureSet::new(cfg.width, cfg.height, pb, db)?;
        let gt = GroundTruth::from_pairs(hm, pairs, n, nb)?;
        return Ok((a, b, gt));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still() -> SynthConfig {
        SynthConfig {
            descriptor_noise_sigma: 0.0,
            outlier_fraction: 0.0,
            max_rotation: 0.0,
            max_scale: 0.0,
            max_translation: 0.0,
            max_perspective: 0.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn identity_warp_without_noise() {
        let (a, b, gt) = generate_pair(&still()).unwrap();
        assert_eq!(gt.homography, Homography::identity());
        assert_eq!(gt.inlier_pairs.len(), a.len());
        assert!(gt.unmatched_a.is_empty() && gt.unmatched_b.is_empty());
        for &(i, j) in &gt.inlier_pairs {
            assert_eq!(a.position(i), b.position(j));
            assert_eq!(a.descriptors().row(i), b.descriptors().row(j));
        }
    }

    #[test]
    fn all_outliers_have_no_pairs() {
        let cfg = SynthConfig {
            outlier_fraction: 1.0,
            ..SynthConfig::default()
        };
        let (a, b, gt) = generate_pair(&cfg).unwrap();
        assert!(gt.inlier_pairs.is_empty());
        assert_eq!(gt.unmatched_a.len(), a.len());
        assert_eq!(gt.unmatched_b.len(), b.len());
    }

    #[test]
    fn rotation_pairs_reproject_exactly() {
        let cfg = SynthConfig {
            descriptor_noise_sigma: 0.1,
            ..still()
        };
        let (a, _, _) = generate_pair(&cfg).unwrap();
        // impose a pure 10 degree rotation and rebuild B from it
        let hm = Homography::rotation_about(10f64.to_radians(), 320.0, 240.0);
        let mut pairs = Vec::new();
        let mut pb = Vec::new();
        let mut kept = Vec::new();
        for i in 0..a.len() {
            let (x, y) = hm.apply(a.position(i));
            if (0.0..640.0).contains(&x) && (0.0..480.0).contains(&y) {
                pairs.push((i, pb.len()));
                pb.push([x, y]);
                kept.push(i);
            }
        }
        let b = FeatureSet::new(640, 480, Tensor2::from_rows(&pb), a.descriptors().select_rows(&kept)).unwrap();
        let gt = GroundTruth::from_pairs(hm, pairs, a.len(), b.len()).unwrap();
        for &(i, j) in &gt.inlier_pairs {
            assert!(gt.reprojection_error(&a, i, &b, j) < 1e-9);
        }
        assert!(gt.inlier_pairs.len() > a.len() / 2);
    }

    #[test]
    fn generated_pairs_reproject_below_gt_epsilon() {
        for seed in 0..20 {
            let (a, b, gt) = generate_pair(&SynthConfig::default().with_seed(seed)).unwrap();
            for &(i, j) in &gt.inlier_pairs {
                assert!(gt.reprojection_error(&a, i, &b, j) < 1e-6);
            }
            let total_a = gt.inlier_pairs.len() + gt.unmatched_a.len();
            let total_b = gt.inlier_pairs.len() + gt.unmatched_b.len();
            assert_eq!((total_a, total_b), (a.len(), b.len()));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig::default().with_seed(42);
        assert_eq!(generate_pair(&cfg).unwrap(), generate_pair(&cfg).unwrap());
        assert_ne!(
            generate_pair(&cfg).unwrap().0,
            generate_pair(&cfg.with_seed(43)).unwrap().0
        );
    }

    #[test]
    fn jittered_labels_respect_threshold() {
        let cfg = SynthConfig {
            position_jitter: 2.0,
            ..SynthConfig::default().with_seed(5)
        };
        let (a, b, gt) = generate_pair(&cfg).unwrap();
        for &(i, j) in &gt.inlier_pairs {
            assert!(gt.reprojection_error(&a, i, &b, j) < CORRECT_MATCH_PX);
        }
    }

    #[test]
    fn homography_inverse_roundtrip() {
        let hm = Homography([1.1, 0.05, 3.0, -0.02, 0.95, -7.0, 1e-4, -2e-4, 1.0]);
        let inv = hm.inverse().unwrap();
        let p = (123.0, 45.0);
        let q = inv.apply(hm.apply(p));
        assert!((q.0 - p.0).abs() < 1e-9 && (q.1 - p.1).abs() < 1e-9);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SynthConfig {
            outlier_fraction: 1.5,
            ..SynthConfig::default()
        };
        assert!(generate_pair(&cfg).is_err());
    }
}
