//! Bypass scores added to the attention logits: descriptor similarity
//! `S_D = f4(D_A) f4(D_B)ᵀ` for cross-attention and relative-position scores
//! `S_P = f5(P) f5(P)ᵀ` for self-attention, each modulated per layer and head
//! as `LReLU(λS + β)`, and refreshed once mid-network from decoded features.

use rand::Rng;

use crate::autodiff::Backend;
use crate::error::{Error, Result};
use crate::nn::{Mlp, ParamId, ParamStore};
use crate::tensor::{lrelu_scalar, Tensor2, LRELU_SLOPE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreKind {
    Descriptor,
    Position,
}

/// One layer's `1 × 1` modulation scalars, indexed by head.
#[derive(Clone, Debug)]
pub struct LayerModulation {
    pub lambda_d: Vec<ParamId>,
    pub beta_d: Vec<ParamId>,
    pub lambda_p: Vec<ParamId>,
    pub beta_p: Vec<ParamId>,
}

impl LayerModulation {
    pub fn scalars(&self, kind: ScoreKind) -> (&[ParamId], &[ParamId]) {
        match kind {
            ScoreKind::Descriptor => (&self.lambda_d, &self.beta_d),
            ScoreKind::Position => (&self.lambda_p, &self.beta_p),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BypassParams {
    /// Raw descriptors, `c → c → r`.
    pub f4: Mlp,
    /// Normalized positions, `2 → c → r`.
    pub f5: Mlp,
    /// Decoded features for the descriptor score, `c → c → r`.
    pub f6: Mlp,
    /// Decoded features for the position score, `c → c → r`.
    pub f7: Mlp,
    pub layers: Vec<LayerModulation>,
}

/// Shape of a [`BypassParams`]: `r` is the embedding width of f4–f7.
#[derive(Clone, Copy, Debug)]
pub struct BypassShape {
    pub channels: usize,
    pub embed: usize,
    pub layers: usize,
    pub heads: usize,
    pub lambda_init: f64,
    pub beta_init: f64,
}

impl BypassParams {
    pub fn new(store: &mut ParamStore, name: &str, shape: BypassShape, rng: &mut impl Rng) -> Self {
        let BypassShape {
            channels: c,
            embed: r,
            ..
        } = shape;
        let f4 = Mlp::new(store, &format!("{name}.f4"), &[c, c, r], rng);
        let f5 = Mlp::new(store, &format!("{name}.f5"), &[2, c, r], rng);
        let f6 = Mlp::new(store, &format!("{name}.f6"), &[c, c, r], rng);
        let f7 = Mlp::new(store, &format!("{name}.f7"), &[c, c, r], rng);
        let mut scalars = |layer: usize, tag: &str, init: f64| -> Vec<ParamId> {
            (0..shape.heads)
                .map(|h| store.add(format!("{name}.layer{layer}.{tag}.head{h}"), Tensor2::scalar(init)))
                .collect()
        };
        let layers = (0..shape.layers)
            .map(|l| LayerModulation {
                lambda_d: scalars(l, "lambda_d", shape.lambda_init),
                beta_d: scalars(l, "beta_d", shape.beta_init),
                lambda_p: scalars(l, "lambda_p", shape.lambda_init),
                beta_p: scalars(l, "beta_p", shape.beta_init),
            })
            .collect();
        Self {
            f4,
            f5,
            f6,
            f7,
            layers,
        }
    }
}

/// `f(a) f(b)ᵀ`
fn embed_product<B: Backend>(
    b: &mut B,
    store: &ParamStore,
    f: &Mlp,
    a: &B::Var,
    other: Option<&B::Var>,
) -> Result<B::Var> {
    let ea = f.forward(b, store, a)?;
    match other {
        Some(o) => {
            let eb = f.forward(b, store, o)?;
            b.matmul_nt(&ea, &eb)
        }
        None => b.matmul_nt(&ea, &ea),
    }
}

pub fn descriptor_similarity<B: Backend>(
    b: &mut B,
    store: &ParamStore,
    f4: &Mlp,
    desc_a: &B::Var,
    desc_b: &B::Var,
) -> Result<B::Var> {
    embed_product(b, store, f4, desc_a, Some(desc_b))
}

pub fn position_similarity<B: Backend>(
    b: &mut B,
    store: &ParamStore,
    f5: &Mlp,
    pos: &B::Var,
) -> Result<B::Var> {
    embed_product(b, store, f5, pos, None)
}

/// `LReLU(λ·s + β)` on plain numbers.
pub fn modulate(s: &Tensor2, lambda: f64, beta: f64) -> Tensor2 {
    s.map(|v| lrelu_scalar(lambda * v + beta, LRELU_SLOPE))
}

/// One modulated copy of `s` per head.
pub fn modulate_heads<B: Backend>(
    b: &mut B,
    store: &ParamStore,
    s: &B::Var,
    lambdas: &[ParamId],
    betas: &[ParamId],
    slope: f64,
) -> Result<Vec<B::Var>> {
    lambdas
        .iter()
        .zip(betas)
        .map(|(&l, &be)| {
            let lv = b.param(store, l);
            let bv = b.param(store, be);
            let a = b.affine(s, &lv, &bv)?;
            Ok(b.lrelu(&a, slope))
        })
        .collect()
}

/// Raw (unmodulated) bypass scores of one image pair.
#[derive(Clone)]
pub struct BypassState<V> {
    /// `N_A × N_B`
    pub s_d: V,
    /// `N_A × N_A`
    pub s_p_a: V,
    /// `N_B × N_B`
    pub s_p_b: V,
    pub adjusted: bool,
}

impl<V: Clone> BypassState<V> {
    /// Initial scores from raw descriptors and normalized positions.
    pub fn compute<B: Backend<Var = V>>(
        b: &mut B,
        store: &ParamStore,
        params: &BypassParams,
        desc_a: &V,
        desc_b: &V,
        pos_a: &V,
        pos_b: &V,
    ) -> Result<Self> {
        Ok(Self {
            s_d: descriptor_similarity(b, store, &params.f4, desc_a, desc_b)?,
            s_p_a: position_similarity(b, store, &params.f5, pos_a)?,
            s_p_b: position_similarity(b, store, &params.f5, pos_b)?,
            adjusted: false,
        })
    }

    /// Adds `f6(X_A) f6(X_B)ᵀ` to the descriptor score and `f7(X) f7(X)ᵀ` to
    /// each position score. Allowed once per pass.
    pub fn adjust<B: Backend<Var = V>>(
        &self,
        b: &mut B,
        store: &ParamStore,
        params: &BypassParams,
        xa: &V,
        xb: &V,
    ) -> Result<Self> {
        if self.adjusted {
            return Err(Error::Usage("bypass scores were already adjusted".into()));
        }
        let dd = embed_product(b, store, &params.f6, xa, Some(xb))?;
        let pa = embed_product(b, store, &params.f7, xa, None)?;
        let pb = embed_product(b, store, &params.f7, xb, None)?;
        Ok(Self {
            s_d: b.add(&self.s_d, &dd)?,
            s_p_a: b.add(&self.s_p_a, &pa)?,
            s_p_b: b.add(&self.s_p_b, &pb)?,
            adjusted: true,
        })
    }
}
