use rand::Rng;

use crate::config::ConvBranchConfig;
use crate::error::Result;
use crate::nn::Linear;
use crate::tensor::{DiffArray, Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug)]
struct ConvStage {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    params: usize,
}

/// Stack of strided `k×k` convolutions with ReLU, used by the LS and CE branches.
#[derive(Clone, Debug)]
pub struct ConvBackbone {
    stages: Vec<ConvStage>,
    kernel: usize,
    grid: [usize; 2],
    out_channels: usize,
}

impl ConvBackbone {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_channels: usize, cfg: &ConvBranchConfig, rng: &mut R) -> Self {
        let depth = if cfg.tap == 0 { cfg.channels.len() } else { cfg.tap };
        let mut c_in = in_channels;
        let mut stages = Vec::with_capacity(depth);
        for (i, (&c_out, &stride)) in cfg.channels.iter().zip(&cfg.strides).take(depth).enumerate() {
            let fan_in = c_in * cfg.kernel * cfg.kernel;
            let weight = store.register(
                format!("{name}.conv{i}.weight"),
                DiffArray::init_he([c_out, c_in, cfg.kernel, cfg.kernel], fan_in, rng),
            );
            let bias = store.register(format!("{name}.conv{i}.bias"), DiffArray::init_uniform([c_out], fan_in, rng));
            stages.push(ConvStage {
                weight,
                bias,
                stride,
                params: c_out * fan_in + c_out,
            });
            c_in = c_out;
        }
        Self {
            stages,
            kernel: cfg.kernel,
            grid: cfg.grid,
            out_channels: c_in,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn grid(&self) -> [usize; 2] {
        self.grid
    }

    /// `[B, C_in, H, W]` → tapped feature map `[B, C, H', W']`.
    pub fn feature_map<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let pad = self.kernel / 2;
        self.stages.iter().try_fold(x, |h, s| {
            Ok(h.conv2d(g.param(store, s.weight), Some(g.param(store, s.bias)), s.stride, pad)?.relu())
        })
    }

    /// `[B, C_in, H, W]` → segment grid `[B, k_h·k_w, C]`.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let fmap = self.feature_map(g, store, x)?;
        pool_to_segments(fmap, self.grid)
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(|s| s.params).sum()
    }
}

/// `[B, C, H, W]` → adaptive pool → `[B, k_h·k_w, C]`.
pub(crate) fn pool_to_segments(fmap: Var<'_>, grid: [usize; 2]) -> Result<Var<'_>> {
    let s = fmap.shape();
    let (b, c) = (s[0], s[1]);
    fmap.adaptive_avg_pool(grid[0], grid[1])?
        .reshape(&[b, c, grid[0] * grid[1]])?
        .permute(&[0, 2, 1])
}

/// Expression-regression head on top of the CE segment grid: mean over
/// segments, affine map to a scalar, sigmoid into `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ExpressionHead {
    linear: Linear,
}

impl ExpressionHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(store, name, channels, 1, true, rng),
        }
    }

    /// `[B, K, C]` → `[B]`.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, grid: Var<'g>) -> Result<Var<'g>> {
        let b = grid.shape()[0];
        let pooled = grid.mean_axis(1)?;
        Ok(self.linear.forward(g, store, pooled)?.reshape(&[b])?.sigmoid())
    }

    pub fn param_count(&self) -> usize {
        self.linear.param_count()
    }
}
