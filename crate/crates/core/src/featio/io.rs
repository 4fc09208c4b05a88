//! Little-endian binary formats.
//!
//! Features: `"RMF1" | u32 width | u32 height | u32 N | u32 c | N×2 f32
//! positions | N×c f32 descriptors`.
//!
//! Ground truth: `"RMG1" | 9 f64 homography | u32 n | n × (u32 i, u32 j)`.
//!
//! Values are stored as f32, so writing a set whose entries are not
//! f32-representable rounds them; anything read back round-trips exactly.

use std::fs;
use std::path::Path;

use super::{first_non_unit, first_out_of_bounds, row_norm, FeatureSet, GroundTruth, Homography};
use crate::error::{Error, Result};
use crate::tensor::Tensor2;

pub const FEATURE_MAGIC: &[u8; 4] = b"RMF1";
pub const GT_MAGIC: &[u8; 4] = b"RMG1";
const FEATURE_HEADER: usize = 20;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, reason: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(self.fail(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn write_features(fs: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = fs.len();
    let c = fs.channels();
    let mut buf = Vec::with_capacity(FEATURE_HEADER + 4 * n * (2 + c));
    buf.extend_from_slice(FEATURE_MAGIC);
    for v in [fs.width(), fs.height(), n as u32, c as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in fs.positions().data().iter().chain(fs.descriptors().data()) {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
        path,
    };
    r.magic(FEATURE_MAGIC)?;
    let width = r.u32("width")?;
    let height = r.u32("height")?;
    let n = r.u32("point count")? as usize;
    let c = r.u32("channel count")? as usize;
    if n == 0 || c == 0 || width == 0 || height == 0 {
        return Err(r.fail(4, "width, height, N and c must all be positive"));
    }
    let expected = FEATURE_HEADER as u64 + 4 * n as u64 * (2 + c as u64);
    if (bytes.len() as u64) < expected {
        return Err(r.fail(
            bytes.len(),
            format!("truncated payload: header implies {expected} bytes, file has {}", bytes.len()),
        ));
    }
    if bytes.len() as u64 > expected {
        return Err(r.fail(expected as usize, "trailing bytes after payload"));
    }
    let mut pos = Vec::with_capacity(2 * n);
    for _ in 0..2 * n {
        pos.push(r.f32("positions")? as f64);
    }
    let desc_offset = r.pos;
    let mut desc = Vec::with_capacity(n * c);
    for _ in 0..n * c {
        desc.push(r.f32("descriptors")? as f64);
    }
    let positions = Tensor2::from_vec(n, 2, pos)?;
    let descriptors = Tensor2::from_vec(n, c, desc)?;
    if let Some(i) = first_out_of_bounds(width, height, &positions) {
        return Err(r.fail(
            FEATURE_HEADER + 8 * i,
            format!("keypoint {i} outside the {width}x{height} image"),
        ));
    }
    if let Some(i) = first_non_unit(&descriptors) {
        return Err(r.fail(
            desc_offset + 4 * c * i,
            format!("descriptor {i} has norm {}", row_norm(descriptors.row(i))),
        ));
    }
    FeatureSet::new(width, height, positions, descriptors)
}

pub fn write_ground_truth(gt: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(4 + 72 + 4 + 8 * gt.inlier_pairs.len());
    buf.extend_from_slice(GT_MAGIC);
    for v in gt.homography.0 {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(gt.inlier_pairs.len() as u32).to_le_bytes());
    for &(i, j) in &gt.inlier_pairs {
        buf.extend_from_slice(&(i as u32).to_le_bytes());
        buf.extend_from_slice(&(j as u32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a ground-truth file; the unmatched lists are rebuilt from the
/// feature counts of the two images.
pub fn read_ground_truth(path: impl AsRef<Path>, n_a: usize, n_b: usize) -> Result<GroundTruth> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
        path,
    };
    r.magic(GT_MAGIC)?;
    let mut h = [0.0; 9];
    for v in &mut h {
        *v = r.f64("homography")?;
    }
    let count = r.u32("pair count")? as usize;
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos;
        let i = r.u32("pair")? as usize;
        let j = r.u32("pair")? as usize;
        if i >= n_a || j >= n_b {
            return Err(r.fail(at, format!("pair ({i}, {j}) outside {n_a}x{n_b}")));
        }
        pairs.push((i, j));
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, "trailing bytes after pairs"));
    }
    GroundTruth::from_pairs(Homography(h), pairs, n_a, n_b)
}
