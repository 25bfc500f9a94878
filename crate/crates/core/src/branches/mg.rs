use std::rc::Rc;

use rand::Rng;

use super::conv::pool_to_segments;
use super::window::{merge_index, WindowIndex};
use crate::config::MgConfig;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{DiffArray, Graph, ParamId, ParamStore, Var};

/// One pre-norm window-attention block: windowed MSA and a ReLU MLP, both
/// residual.
#[derive(Clone, Debug)]
struct WindowBlock {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    shifted: bool,
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<WindowBlock>,
    side: usize,
    dim: usize,
    /// 4C → 2C reduction applied after the stage, if another stage follows.
    merge: Option<Linear>,
}

/// Hierarchical shifted-window attention backbone.
///
/// Patch embedding, then `depth` stages of (unshifted block, shifted block)
/// with a 2×2 merge between consecutive stages.
#[derive(Clone, Debug)]
pub struct MgBackbone {
    embed_weight: ParamId,
    embed_bias: ParamId,
    patch: usize,
    window: usize,
    shift: usize,
    stages: Vec<Stage>,
    grid: [usize; 2],
    params: usize,
}

impl MgBackbone {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_channels: usize, input_size: usize, cfg: &MgConfig, rng: &mut R) -> Result<Self> {
        if input_size % cfg.patch != 0 {
            return Err(Error::Config(format!("patch {} does not divide input {input_size}", cfg.patch)));
        }
        let fan_in = in_channels * cfg.patch * cfg.patch;
        let embed_weight = store.register(
            format!("{name}.embed.weight"),
            DiffArray::init_he([cfg.embed, in_channels, cfg.patch, cfg.patch], fan_in, rng),
        );
        let embed_bias = store.register(format!("{name}.embed.bias"), DiffArray::init_uniform([cfg.embed], fan_in, rng));
        let mut params = cfg.embed * fan_in + cfg.embed;
        let mut side = input_size / cfg.patch;
        let mut dim = cfg.embed;
        let mut stages = Vec::with_capacity(cfg.depth);
        for s in 0..cfg.depth {
            if side % cfg.window != 0 {
                return Err(Error::Config(format!("window {} does not divide stage-{s} extent {side}", cfg.window)));
            }
            let mut blocks = Vec::with_capacity(2);
            for (b, shifted) in [false, true].into_iter().enumerate() {
                let p = format!("{name}.stage{s}.block{b}");
                let norm1 = LayerNorm::new(store, &format!("{p}.norm1"), dim);
                let attn = MultiHeadAttention::new(store, &format!("{p}.attn"), dim, cfg.heads, rng)?;
                let norm2 = LayerNorm::new(store, &format!("{p}.norm2"), dim);
                let fc1 = Linear::new(store, &format!("{p}.fc1"), dim, 2 * dim, true, rng);
                let fc2 = Linear::new(store, &format!("{p}.fc2"), 2 * dim, dim, true, rng);
                params += norm1.param_count() + attn.param_count() + norm2.param_count() + fc1.param_count() + fc2.param_count();
                blocks.push(WindowBlock {
                    norm1,
                    attn,
                    norm2,
                    fc1,
                    fc2,
                    shifted,
                });
            }
            let merge = (s + 1 < cfg.depth).then(|| Linear::new(store, &format!("{name}.stage{s}.merge"), 4 * dim, 2 * dim, false, rng));
            params += merge.as_ref().map_or(0, Linear::param_count);
            stages.push(Stage { blocks, side, dim, merge });
            if s + 1 < cfg.depth {
                if side % 2 != 0 {
                    return Err(Error::Config(format!("stage-{s} extent {side} cannot be merged")));
                }
                side /= 2;
                dim *= 2;
            }
        }
        if cfg.grid[0] > side || cfg.grid[1] > side {
            return Err(Error::Config(format!("grid {:?} exceeds final extent {side}", cfg.grid)));
        }
        Ok(Self {
            embed_weight,
            embed_bias,
            patch: cfg.patch,
            window: cfg.window,
            shift: cfg.shift,
            stages,
            grid: cfg.grid,
            params,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.dim)
    }

    pub fn out_side(&self) -> usize {
        self.stages.last().map_or(0, |s| s.side)
    }

    pub fn grid(&self) -> [usize; 2] {
        self.grid
    }

    pub fn param_count(&self) -> usize {
        self.params
    }

    /// `[B, C_in, H, W]` → final feature map `[B, C, H', W']`.
    pub fn feature_map<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        let batch = x.shape()[0];
        let embedded = x.conv2d(g.param(store, self.embed_weight), Some(g.param(store, self.embed_bias)), self.patch, 0)?;
        let e = embedded.shape();
        let mut tokens = embedded.permute(&[0, 2, 3, 1])?.reshape(&[batch * e[2] * e[3], e[1]])?;
        let mut side = e[2];
        for stage in &self.stages {
            for block in &stage.blocks {
                let shift = if block.shifted { self.shift } else { 0 };
                tokens = self.block_forward(g, store, block, tokens, batch, side, shift, stage.dim)?;
            }
            if let Some(merge) = &stage.merge {
                let idx = merge_index(side, side, batch)?;
                side /= 2;
                let grouped = tokens.gather_rows(idx)?.reshape(&[batch * side * side, 4 * stage.dim])?;
                tokens = merge.forward(g, store, grouped)?;
            }
        }
        let c = tokens.shape()[1];
        tokens.reshape(&[batch, side, side, c])?.permute(&[0, 3, 1, 2])
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward<'g>(
        &self,
        g: &'g Graph,
        store: &ParamStore,
        block: &WindowBlock,
        tokens: Var<'g>,
        batch: usize,
        side: usize,
        shift: usize,
        dim: usize,
    ) -> Result<Var<'g>> {
        let idx = WindowIndex::new(side, side, self.window, shift)?;
        let per = idx.tokens_per_window();
        let order: Rc<[usize]> = idx.batched_order(batch);
        let normed = block.norm1.forward(g, store, tokens)?;
        let windows = normed.gather_rows(order)?.reshape(&[batch * idx.windows(), per, dim])?;
        let attended = block.attn.forward(g, store, windows)?.output;
        let back = attended.reshape(&[batch * side * side, dim])?.gather_rows(idx.batched_inverse(batch))?;
        let h = tokens.add(back)?;
        let hidden = block.fc1.forward(g, store, block.norm2.forward(g, store, h)?)?.relu();
        let mlp = block.fc2.forward(g, store, hidden)?;
        h.add(mlp)
    }

    /// `[B, C_in, H, W]` → segment grid `[B, k_h·k_w, C]`.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        pool_to_segments(self.feature_map(g, store, x)?, self.grid)
    }
}
