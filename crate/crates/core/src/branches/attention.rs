use rand::Rng;

use crate::error::Result;
use crate::nn::{LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{Graph, ParamStore, Var};

/// Relates the pooled segments of one branch and averages them into a
/// `D`-dimensional embedding.
///
/// Each segment is projected to `D`, passed through one pre-norm residual
/// MSA block, and the resulting rows are averaged.
#[derive(Clone, Debug)]
pub struct SegmentAttention {
    pub project: Linear,
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
}

pub struct SegmentAttended<'g> {
    /// Transformed segments `[B, K, D]`.
    pub transformed: Var<'g>,
    /// Mean over segments `[B, D]`.
    pub pooled: Var<'g>,
    /// Attention weights `[B·heads, K, K]`.
    pub weights: Var<'g>,
}

impl SegmentAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            project: Linear::new(store, &format!("{name}.proj"), channels, dim, true, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.msa"), dim, heads, rng)?,
        })
    }

    /// `grid` is `[B, K, C]`.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, grid: Var<'g>) -> Result<SegmentAttended<'g>> {
        let s = grid.shape();
        let (b, k, c) = (s[0], s[1], s[2]);
        let dim = self.project.out_dim;
        let projected = self.project.forward(g, store, grid.reshape(&[b * k, c])?)?.reshape(&[b, k, dim])?;
        let att = self.attn.forward(g, store, self.norm.forward(g, store, projected)?)?;
        let transformed = projected.add(att.output)?;
        let pooled = transformed.mean_axis(1)?;
        Ok(SegmentAttended {
            transformed,
            pooled,
            weights: att.weights,
        })
    }

    pub fn param_count(&self) -> usize {
        self.project.param_count() + self.norm.param_count() + self.attn.param_count()
    }
}
