use super::{FeatureMap, SegmentGrid};
use crate::error::Result;
use crate::tensor::{DiffArray, Graph};

/// Partitions `map` into a `kh×kw` grid of windows and averages each.
///
/// Window `(i, j)` spans rows `⌊iH/kh⌋..⌊(i+1)H/kh⌋` and the analogous
/// columns, so every cell belongs to exactly one segment even when the
/// extents are not divisible.
pub fn adaptive_avg_pool(map: &FeatureMap, kh: usize, kw: usize) -> Result<SegmentGrid> {
    let g = Graph::new();
    let x = g.input(&DiffArray::new([map.channels, map.height, map.width], map.values.clone())?);
    let pooled = x.adaptive_avg_pool(kh, kw)?.value();
    let k = kh * kw;
    // channel-major [C, k] → segment-major [k, C]
    let mut segments = vec![0.0; k * map.channels];
    for c in 0..map.channels {
        for s in 0..k {
            segments[s * map.channels + c] = pooled[c * k + s];
        }
    }
    Ok(SegmentGrid {
        channels: map.channels,
        kh,
        kw,
        stride_h: map.height / kh,
        stride_w: map.width / kw,
        segments,
    })
}
