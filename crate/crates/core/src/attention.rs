//! Multi-head attention with an optional additive per-head bypass score,
//! followed by the residual merge `x + f3(x ‖ W_x̃(X̃))`.

use rand::Rng;

use crate::autodiff::{Backend, Eager};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, ParamStore};
use crate::sparse::NeighborIndex;
use crate::tensor::Tensor2;

#[derive(Clone, Debug)]
pub struct HeadProjections {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub heads: Vec<HeadProjections>,
    /// `W_x̃`, `c → c`.
    pub merge: Linear,
    /// `2c → 2c → c`.
    pub f3: Mlp,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::config(format!(
                "{heads} heads do not divide {c} channels"
            )));
        }
        let d = c / heads;
        let heads = (0..heads)
            .map(|h| HeadProjections {
                wq: Linear::new(store, &format!("{name}.head{h}.q"), c, d, rng),
                wk: Linear::new(store, &format!("{name}.head{h}.k"), c, d, rng),
                wv: Linear::new(store, &format!("{name}.head{h}.v"), c, d, rng),
            })
            .collect();
        Ok(Self {
            heads,
            merge: Linear::new(store, &format!("{name}.merge"), c, c, rng),
            f3: Mlp::new(store, &format!("{name}.f3"), &[2 * c, 2 * c, c], rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.merge.in_dim
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.num_heads()
    }
}

/// Block output plus, when requested, each head's post-softmax weights.
/// Dense weights are `N_q × N_k`; restricted weights are `N_q × k` and
/// column `t` refers to key `neighbors.row(i)[t]`.
pub struct Attended<V> {
    pub out: V,
    pub weights: Vec<V>,
}

/// Attention of queries `x` over keys `y`. `bypass[h]` is added to head
/// `h`'s scaled scores before the softmax.
pub fn attend<B: Backend>(
    b: &mut B,
    store: &ParamStore,
    params: &AttentionParams,
    x: &B::Var,
    y: &B::Var,
    bypass: Option<&[B::Var]>,
    capture: bool,
) -> Result<Attended<B::Var>> {
    attend_over(b, store, params, x, y, bypass, None, capture)
}

pub fn self_attend<B: Backend>(
    b: &mut B,
    store: &ParamStore,
    params: &AttentionParams,
    x: &B::Var,
    bypass: Option<&[B::Var]>,
) -> Result<B::Var> {
    Ok(attend(b, store, params, x, x, bypass, false)?.out)
}

pub fn cross_attend<B: Backend>(
    b: &mut B,
    store: &ParamStore,
    params: &AttentionParams,
    x: &B::Var,
    y: &B::Var,
    bypass: Option<&[B::Var]>,
) -> Result<B::Var> {
    Ok(attend(b, store, params, x, y, bypass, false)?.out)
}

/// Shared body of the dense and neighbor-restricted blocks. With
/// `neighbors`, each query only scores its listed keys and `bypass[h]` must
/// already be gathered to `N_q × k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_over<B: Backend>(
    b: &mut B,
    store: &ParamStore,
    params: &AttentionParams,
    x: &B::Var,
    y: &B::Var,
    bypass: Option<&[B::Var]>,
    neighbors: Option<&NeighborIndex>,
    capture: bool,
) -> Result<Attended<B::Var>> {
    let c = params.channels();
    let (xs, ys) = (b.value(x).shape(), b.value(y).shape());
    if xs.1 != c || ys.1 != c {
        return Err(Error::shape("attend", xs, ys));
    }
    if let Some(bp) = bypass {
        if bp.len() != params.num_heads() {
            return Err(Error::config(format!(
                "bypass has {} heads, block has {}",
                bp.len(),
                params.num_heads()
            )));
        }
    }
    let inv_sqrt = 1.0 / (params.head_dim() as f64).sqrt();
    let mut outs = Vec::with_capacity(params.num_heads());
    let mut weights = Vec::new();
    for (h, head) in params.heads.iter().enumerate() {
        let q = head.wq.forward(b, store, x)?;
        let k = head.wk.forward(b, store, y)?;
        let v = head.wv.forward(b, store, y)?;
        let raw = match neighbors {
            None => b.matmul_nt(&q, &k)?,
            Some(idx) => b.gather_dot(&q, &k, idx)?,
        };
        let mut s = b.scale(&raw, inv_sqrt);
        if let Some(bp) = bypass {
            s = b.add(&s, &bp[h])?;
        }
        let w = b.softmax_rows(&s, 1.0);
        let o = match neighbors {
            None => b.matmul(&w, &v)?,
            Some(idx) => b.gather_mix(&w, &v, idx)?,
        };
        outs.push(o);
        if capture {
            weights.push(w);
        }
    }
    let mixed = b.concat_cols(&outs)?;
    drop(outs);
    let merged = params.merge.forward(b, store, &mixed)?;
    let cat = b.concat_cols(&[x.clone(), merged])?;
    let delta = params.f3.forward(b, store, &cat)?;
    let out = b.add(x, &delta)?;
    Ok(Attended { out, weights })
}

/// Evaluates [`attend`] on plain tensors.
pub fn attend_tensors(
    store: &ParamStore,
    params: &AttentionParams,
    x: &Tensor2,
    y: &Tensor2,
    bypass: Option<&[Tensor2]>,
) -> Result<Tensor2> {
    let mut e = Eager::new();
    let xv = e.constant(x.clone());
    let yv = e.constant(y.clone());
    let bp: Option<Vec<_>> = bypass.map(|s| s.iter().map(|t| e.constant(t.clone())).collect());
    let out = attend(&mut e, store, params, &xv, &yv, bp.as_deref(), false)?.out;
    Ok(e.value(&out).clone())
}
