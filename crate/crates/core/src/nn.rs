//! Small layer building blocks over the tensor engine.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{DiffArray, Graph, ParamId, ParamStore, Var};

/// Affine map `x·W (+ b)` over the last axis of a rank-2 input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        let weight = store.register(format!("{name}.weight"), DiffArray::init_uniform([in_dim, out_dim], in_dim, rng));
        let bias = bias.then(|| store.register(format!("{name}.bias"), DiffArray::init_uniform([out_dim], in_dim, rng)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let y = x.matmul(g.param(store, self.weight))?;
        match self.bias {
            Some(b) => y.add_bias(g.param(store, b)),
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// Scaled dot-product multi-head self-attention over groups of tokens.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Attention output plus the per-head attention weights `[groups·heads, n, n]`.
pub struct Attended<'g> {
    pub output: Var<'g>,
    pub weights: Var<'g>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{name}: dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, false, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, false, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
            dim,
        })
    }

    /// `x` is `[groups, n, dim]`; attention runs independently inside each group.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Attended<'g>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::dim("attention", &shape, &[self.dim]));
        }
        let (groups, n, h) = (shape[0], shape[1], self.heads);
        let dh = self.dim / h;
        let flat = x.reshape(&[groups * n, self.dim])?;
        let split = |lin: &Linear, perm: &[usize], out: &[usize]| -> Result<Var<'g>> {
            lin.forward(g, store, flat)?.reshape(&[groups, n, h, dh])?.permute(perm)?.reshape(out)
        };
        let q = split(&self.query, &[0, 2, 1, 3], &[groups * h, n, dh])?;
        let kt = split(&self.key, &[0, 2, 3, 1], &[groups * h, dh, n])?;
        let v = split(&self.value, &[0, 2, 1, 3], &[groups * h, n, dh])?;
        let weights = q.bmm(kt)?.scale(1.0 / (dh as f64).sqrt()).softmax_last()?;
        let mixed = weights
            .bmm(v)?
            .reshape(&[groups, h, n, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[groups * n, self.dim])?;
        let output = self.output.forward(g, store, mixed)?.reshape(&[groups, n, self.dim])?;
        Ok(Attended { output, weights })
    }

    pub fn param_count(&self) -> usize {
        self.query.param_count() + self.key.param_count() + self.value.param_count() + self.output.param_count()
    }
}

/// Layer normalisation over the last axis with learnable scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.register(format!("{name}.gamma"), DiffArray::filled([dim], 1.0)),
            beta: store.register(format!("{name}.beta"), DiffArray::zeros([dim])),
            dim,
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(g.param(store, self.gamma), g.param(store, self.beta), Self::EPS)
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }
}
