//! Parameter storage, linear layers and MLPs.

use rand::Rng;

use crate::autodiff::{Backend, Eager};
use crate::error::{Error, Result};
use crate::tensor::{Tensor2, LRELU_SLOPE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor2,
    pub grad: Tensor2,
}

/// Every learnable tensor of a model, each with a same-shaped gradient slot.
/// Names are unique and hierarchical (`layer2.cross.wq.h0.weight`).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        let grad = Tensor2::zeros(value.rows(), value.cols());
        self.params.push(Param { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2 {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// `y = x · Wᵀ + b` with `W` stored `out × in` and `b` as a `1 × out` row.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Kaiming-uniform weights with PyTorch's default `a = √5`, which gives
    /// the bound `1/√fan_in`; zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = Tensor2::from_fn(out_dim, in_dim, |_, _| rng.random_range(-bound..bound));
        Self::from_tensors(store, name, w, Tensor2::zeros(1, out_dim))
    }

    pub fn from_tensors(store: &mut ParamStore, name: &str, weight: Tensor2, bias: Tensor2) -> Self {
        assert_eq!(bias.shape(), (1, weight.rows()), "bias must be 1 x out");
        let (out_dim, in_dim) = weight.shape();
        Self {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), bias),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<B: Backend>(&self, b: &mut B, store: &ParamStore, x: &B::Var) -> Result<B::Var> {
        let w = b.param(store, self.weight);
        let bias = b.param(store, self.bias);
        let xw = b.matmul_nt(x, &w)?;
        b.add_row(&xw, &bias)
    }
}

/// Linear layers with a leaky ReLU between consecutive layers and nothing
/// after the last one.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub slope: f64,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self {
            layers,
            slope: LRELU_SLOPE,
        }
    }

    /// Wraps hand-built layers; consecutive dimensions must chain.
    pub fn from_layers(layers: Vec<Linear>) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::shape(
                    "mlp",
                    (w[0].in_dim, w[0].out_dim),
                    (w[1].in_dim, w[1].out_dim),
                ));
            }
        }
        if layers.is_empty() {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        Ok(Self {
            layers,
            slope: LRELU_SLOPE,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward<B: Backend>(&self, b: &mut B, store: &ParamStore, x: &B::Var) -> Result<B::Var> {
        let in_cols = b.value(x).cols();
        if in_cols != self.in_dim() {
            return Err(Error::shape(
                "mlp_forward",
                b.value(x).shape(),
                (self.in_dim(), self.out_dim()),
            ));
        }
        let mut h = self.layers[0].forward(b, store, x)?;
        for layer in &self.layers[1..] {
            h = b.lrelu(&h, self.slope);
            h = layer.forward(b, store, &h)?;
        }
        Ok(h)
    }
}

/// Evaluates an MLP on plain tensors.
pub fn mlp_forward(m: &Mlp, store: &ParamStore, x: &Tensor2) -> Result<Tensor2> {
    let mut e = Eager::new();
    let xv = e.constant(x.clone());
    let y = m.forward(&mut e, store, &xv)?;
    Ok(e.value(&y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{lrelu, matmul};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2 {
        Tensor2::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_mlp_gives_zero() {
        let mut store = ParamStore::new();
        let l0 = Linear::from_tensors(&mut store, "a", Tensor2::zeros(4, 3), Tensor2::zeros(1, 4));
        let l1 = Linear::from_tensors(&mut store, "b", Tensor2::zeros(2, 4), Tensor2::zeros(1, 2));
        let m = Mlp::from_layers(vec![l0, l1]).unwrap();
        let y = mlp_forward(&m, &store, &Tensor2::filled(5, 3, 0.7)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passthrough() {
        let mut store = ParamStore::new();
        let l = Linear::from_tensors(&mut store, "id", Tensor2::identity(3), Tensor2::zeros(1, 3));
        let m = Mlp::from_layers(vec![l]).unwrap();
        let x = Tensor2::from_rows(&[[1.0, -2.0, 3.5], [0.0, 0.25, -7.0]]);
        assert_eq!(mlp_forward(&m, &store, &x).unwrap(), x);
    }

    #[test]
    fn two_layer_matches_unrolled_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let m = Mlp::new(&mut store, "m", &[3, 5, 2], &mut rng);
        for l in &m.layers {
            *store.value_mut(l.bias) = rand_tensor(&mut rng, 1, l.out_dim);
        }
        let x = rand_tensor(&mut rng, 4, 3);

        let w0 = store.value(m.layers[0].weight).transpose();
        let b0 = store.value(m.layers[0].bias);
        let w1 = store.value(m.layers[1].weight).transpose();
        let b1 = store.value(m.layers[1].bias);
        let mut h = matmul(&x, &w0).unwrap();
        for r in 0..h.rows() {
            for c in 0..h.cols() {
                h.set(r, c, h.get(r, c) + b0.get(0, c));
            }
        }
        let h = lrelu(&h, LRELU_SLOPE);
        let mut y = matmul(&h, &w1).unwrap();
        for r in 0..y.rows() {
            for c in 0..y.cols() {
                y.set(r, c, y.get(r, c) + b1.get(0, c));
            }
        }
        let got = mlp_forward(&m, &store, &x).unwrap();
        assert!(got.max_abs_diff(&y) < 1e-14);
    }

    #[test]
    fn input_width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let m = Mlp::new(&mut store, "m", &[3, 2], &mut rng);
        let err = mlp_forward(&m, &store, &Tensor2::zeros(1, 4)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn non_chaining_layers_rejected() {
        let mut store = ParamStore::new();
        let l0 = Linear::from_tensors(&mut store, "a", Tensor2::zeros(4, 3), Tensor2::zeros(1, 4));
        let l1 = Linear::from_tensors(&mut store, "b", Tensor2::zeros(2, 5), Tensor2::zeros(1, 2));
        assert!(Mlp::from_layers(vec![l0, l1]).is_err());
    }

    #[test]
    fn zero_grads_clears_slots() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor2::scalar(1.0));
        store.grad_mut(id).set(0, 0, 5.0);
        store.zero_grads();
        assert_eq!(store.grad(id).data(), &[0.0]);
    }
}
