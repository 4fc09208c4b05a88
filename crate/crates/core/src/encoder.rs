//! Initial per-keypoint features: `x_i = f1(d_i) + f2(p̂_i)`.

use rand::Rng;

use crate::autodiff::{Backend, Eager};
use crate::error::{Error, Result};
use crate::featio::{normalize_positions, FeatureSet};
use crate::nn::{Mlp, ParamStore};
use crate::tensor::Tensor2;

#[derive(Clone, Debug)]
pub struct EncoderParams {
    /// Descriptor branch, `c → c → c`.
    pub f1: Mlp,
    /// Position branch, `2 → c/2 → c → c`.
    pub f2: Mlp,
}

impl EncoderParams {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut impl Rng) -> Self {
        let half = (c / 2).max(1);
        Self {
            f1: Mlp::new(store, &format!("{name}.f1"), &[c, c, c], rng),
            f2: Mlp::new(store, &format!("{name}.f2"), &[2, half, c, c], rng),
        }
    }

    pub fn from_mlps(f1: Mlp, f2: Mlp) -> Result<Self> {
        if f2.in_dim() != 2 {
            return Err(Error::config(format!(
                "position MLP must take 2 inputs, takes {}",
                f2.in_dim()
            )));
        }
        if f1.out_dim() != f2.out_dim() {
            return Err(Error::shape(
                "encoder",
                (f1.in_dim(), f1.out_dim()),
                (f2.in_dim(), f2.out_dim()),
            ));
        }
        Ok(Self { f1, f2 })
    }

    pub fn channels(&self) -> usize {
        self.f1.in_dim()
    }
}

/// Fuses raw descriptors (`N × c`) and normalized positions (`N × 2`).
pub fn encode<B: Backend>(
    b: &mut B,
    store: &ParamStore,
    params: &EncoderParams,
    descriptors: &B::Var,
    positions: &B::Var,
) -> Result<B::Var> {
    let d = b.value(descriptors).shape();
    if d.1 != params.f1.in_dim() {
        return Err(Error::shape("fuse", d, (d.0, params.f1.in_dim())));
    }
    let p = b.value(positions).shape();
    if p != (d.0, 2) {
        return Err(Error::shape("fuse", d, p));
    }
    let vis = params.f1.forward(b, store, descriptors)?;
    let geo = params.f2.forward(b, store, positions)?;
    b.add(&vis, &geo)
}

/// Normalizes the positions of `fs` and fuses them with its descriptors.
pub fn fuse(fs: &FeatureSet, params: &EncoderParams, store: &ParamStore) -> Result<Tensor2> {
    let mut e = Eager::new();
    let d = e.constant(fs.descriptors().clone());
    let p = e.constant(normalize_positions(fs));
    let x = encode(&mut e, store, params, &d, &p)?;
    Ok(e.value(&x).clone())
}
