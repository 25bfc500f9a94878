//! The three frame encoders (LS, MG, CE), segment pooling and segment attention.

mod attention;
mod conv;
mod mg;
mod pool;
pub mod window;

use rand::Rng;

pub use attention::{SegmentAttended, SegmentAttention};
pub use conv::{ConvBackbone, ExpressionHead};
pub use mg::MgBackbone;
pub use pool::adaptive_avg_pool;
pub use window::{window_partition_shift, window_reverse, Window, WindowConfig, WindowIndex};

use crate::config::{BranchId, RunConfig};
use crate::error::{Error, Result};
use crate::tensor::{DiffArray, Graph, ParamStore, Var};

/// One video frame, `C×H×W` values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub index: usize,
    pub clip_id: String,
}

impl Frame {
    pub fn new(clip_id: impl Into<String>, index: usize, channels: usize, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height < 8 || width < 8 || channels == 0 {
            return Err(Error::Input(format!("frame must be at least 8×8, got {channels}×{height}×{width}")));
        }
        if pixels.len() != channels * height * width {
            return Err(Error::dim("Frame::new", &[channels, height, width], &[pixels.len()]));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Input("frame pixels must lie in [0, 1]".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
            index,
            clip_id: clip_id.into(),
        })
    }

    /// Centre crop to `size×size`; frames already at that size are copied.
    pub fn center_crop(&self, size: usize) -> Result<Vec<f64>> {
        if size > self.height || size > self.width {
            return Err(Error::dim("center_crop", &[self.height, self.width], &[size, size]));
        }
        let (y0, x0) = ((self.height - size) / 2, (self.width - size) / 2);
        let mut out = Vec::with_capacity(self.channels * size * size);
        for c in 0..self.channels {
            for y in 0..size {
                let row = (c * self.height + y0 + y) * self.width + x0;
                out.extend_from_slice(&self.pixels[row..row + size]);
            }
        }
        Ok(out)
    }
}

/// Stacks cropped frames into a `[B, C, S, S]` batch.
pub fn frame_batch(frames: &[&Frame], channels: usize, size: usize) -> Result<DiffArray> {
    if frames.is_empty() {
        return Err(Error::Batch("empty frame batch".into()));
    }
    let mut values = Vec::with_capacity(frames.len() * channels * size * size);
    for f in frames {
        if f.channels != channels {
            return Err(Error::dim("frame_batch", &[f.channels], &[channels]));
        }
        values.extend(f.center_crop(size)?);
    }
    DiffArray::new([frames.len(), channels, size, size], values)
}

/// Spatial output of one branch backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub branch: BranchId,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `C×H×W`, row-major.
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(branch: BranchId, channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || values.len() != channels * height * width {
            return Err(Error::dim("FeatureMap::new", &[channels, height, width], &[values.len()]));
        }
        Ok(Self {
            branch,
            channels,
            height,
            width,
            values,
        })
    }
}

/// Pooled segmentation of a feature map, flattened to `(k_h·k_w) × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentGrid {
    pub channels: usize,
    pub kh: usize,
    pub kw: usize,
    /// Nominal pooling strides `⌊H/k_h⌋`, `⌊W/k_w⌋`.
    pub stride_h: usize,
    pub stride_w: usize,
    /// Segment-major: row `s` holds the `C` channel means of segment `s`.
    pub segments: Vec<f64>,
}

impl SegmentGrid {
    pub fn len(&self) -> usize {
        self.kh * self.kw
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segment(&self, s: usize) -> &[f64] {
        &self.segments[s * self.channels..(s + 1) * self.channels]
    }
}

/// Pooled per-frame vector of one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchEmbedding {
    pub branch: BranchId,
    pub vector: Vec<f64>,
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Conv(ConvBackbone),
    Window(MgBackbone),
}

/// Backbone, segment attention and (for CE) the expression head of one branch.
#[derive(Clone, Debug)]
pub struct BranchEncoder {
    pub id: BranchId,
    pub backbone: Backbone,
    pub attention: SegmentAttention,
    pub expression: Option<ExpressionHead>,
}

impl BranchEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, id: BranchId, cfg: &RunConfig, rng: &mut R) -> Result<Self> {
        let c_in = cfg.input.channels;
        let prefix = id.as_str().to_ascii_lowercase();
        let (backbone, channels) = match id {
            BranchId::Ls => {
                let b = ConvBackbone::new(store, &prefix, c_in, &cfg.ls, rng);
                let c = b.out_channels();
                (Backbone::Conv(b), c)
            }
            BranchId::Ce => {
                let b = ConvBackbone::new(store, &prefix, c_in, &cfg.ce.conv, rng);
                let c = b.out_channels();
                (Backbone::Conv(b), c)
            }
            BranchId::Mg => {
                let b = MgBackbone::new(store, &prefix, c_in, cfg.input.size, &cfg.mg, rng)?;
                let c = b.out_channels();
                (Backbone::Window(b), c)
            }
        };
        let attention = SegmentAttention::new(
            store,
            &format!("{prefix}.segattn"),
            channels,
            cfg.attention.embed_dim,
            cfg.attention.heads,
            rng,
        )?;
        let expression = (id == BranchId::Ce).then(|| ExpressionHead::new(store, "ce.expression", channels, rng));
        Ok(Self {
            id,
            backbone,
            attention,
            expression,
        })
    }

    pub fn feature_map<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        match &self.backbone {
            Backbone::Conv(b) => b.feature_map(g, store, x),
            Backbone::Window(b) => b.feature_map(g, store, x),
        }
    }

    /// `[B, C_in, H, W]` → `[B, k_h·k_w, C]`.
    pub fn segments<'g>(&self, g: &'g Graph, store: &ParamStore, x: Var<'g>) -> Result<Var<'g>> {
        match &self.backbone {
            Backbone::Conv(b) => b.forward(g, store, x),
            Backbone::Window(b) => b.forward(g, store, x),
        }
    }

    pub fn grid_shape(&self) -> [usize; 2] {
        match &self.backbone {
            Backbone::Conv(b) => b.grid(),
            Backbone::Window(b) => b.grid(),
        }
    }

    pub fn backbone_params(&self) -> usize {
        match &self.backbone {
            Backbone::Conv(b) => b.param_count(),
            Backbone::Window(b) => b.param_count(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.backbone_params() + self.attention.param_count() + self.expression.as_ref().map_or(0, ExpressionHead::param_count)
    }
}

/// Converts a batched segment var `[B, K, C]` into per-frame [`SegmentGrid`]s.
pub fn grids_from_var(v: Var<'_>, kh: usize, kw: usize, stride: [usize; 2]) -> Vec<SegmentGrid> {
    let s = v.shape();
    let (b, k, c) = (s[0], s[1], s[2]);
    let vals = v.value();
    (0..b)
        .map(|i| SegmentGrid {
            channels: c,
            kh,
            kw,
            stride_h: stride[0],
            stride_w: stride[1],
            segments: vals[i * k * c..(i + 1) * k * c].to_vec(),
        })
        .collect()
}
