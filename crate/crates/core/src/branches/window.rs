//! Window partitioning with cyclic shift, and 2×2 token merging.
//!
//! Index maps are computed once per geometry and applied with
//! [`Var::gather_rows`](crate::tensor::Var::gather_rows), so the backward pass
//! is the matching scatter.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::FeatureMap;
use crate::error::{Error, Result};

/// Window attention geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Window side `M`.
    pub size: usize,
    /// Cyclic shift applied on shifted stages; defaults to `M / 2`.
    pub shift: usize,
    pub heads: usize,
    pub depth: usize,
}

impl WindowConfig {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            shift: size / 2,
            heads: 1,
            depth: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("window size must be positive".into()));
        }
        if self.shift >= self.size {
            return Err(Error::Config(format!("shift {} must be smaller than window {}", self.shift, self.size)));
        }
        Ok(())
    }
}

/// Token order of a (possibly shifted) window partition of an `h×w` grid.
///
/// `order[i]` is the row-major position in the original grid of the `i`-th
/// token in window order (windows row-major, tokens row-major within a
/// window). A shifted partition first rolls the grid by `(−shift, −shift)`,
/// so window `(0,0)` starts at original position `(shift, shift)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowIndex {
    pub height: usize,
    pub width: usize,
    pub size: usize,
    pub shift: usize,
    pub order: Vec<usize>,
    pub inverse: Vec<usize>,
}

impl WindowIndex {
    pub fn new(height: usize, width: usize, size: usize, shift: usize) -> Result<Self> {
        if size == 0 || shift >= size {
            return Err(Error::Config(format!("invalid window {size} with shift {shift}")));
        }
        if height % size != 0 || width % size != 0 {
            return Err(Error::dim("window_partition", &[height, width], &[size, size]));
        }
        let mut order = Vec::with_capacity(height * width);
        for wy in 0..height / size {
            for wx in 0..width / size {
                for ty in 0..size {
                    for tx in 0..size {
                        let y = (wy * size + ty + shift) % height;
                        let x = (wx * size + tx + shift) % width;
                        order.push(y * width + x);
                    }
                }
            }
        }
        let mut inverse = vec![0; order.len()];
        for (i, &src) in order.iter().enumerate() {
            inverse[src] = i;
        }
        Ok(Self {
            height,
            width,
            size,
            shift,
            order,
            inverse,
        })
    }

    pub fn windows(&self) -> usize {
        (self.height / self.size) * (self.width / self.size)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.size * self.size
    }

    /// Gather index over a batch of `batch` grids stored as consecutive row blocks.
    pub fn batched_order(&self, batch: usize) -> Rc<[usize]> {
        batch_index(&self.order, batch, self.height * self.width)
    }

    pub fn batched_inverse(&self, batch: usize) -> Rc<[usize]> {
        batch_index(&self.inverse, batch, self.height * self.width)
    }
}

fn batch_index(per_item: &[usize], batch: usize, stride: usize) -> Rc<[usize]> {
    (0..batch)
        .flat_map(|b| per_item.iter().map(move |&i| b * stride + i))
        .collect()
}

/// Gather index that groups each 2×2 neighbourhood of an `h×w` grid into four
/// consecutive rows, ordered (0,0), (1,0), (0,1), (1,1); reshaping the result
/// to `[·, 4C]` concatenates the neighbours.
pub fn merge_index(height: usize, width: usize, batch: usize) -> Result<Rc<[usize]>> {
    if height % 2 != 0 || width % 2 != 0 {
        return Err(Error::dim("merge", &[height, width], &[2, 2]));
    }
    let mut per = Vec::with_capacity(height * width);
    for y in 0..height / 2 {
        for x in 0..width / 2 {
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                per.push((2 * y + dy) * width + 2 * x + dx);
            }
        }
    }
    Ok(batch_index(&per, batch, height * width))
}

/// A single `C×M×M` window cut from a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// Window coordinates in the partition grid.
    pub row: usize,
    pub col: usize,
    /// `C×M×M` values, channel-major.
    pub values: Vec<f64>,
}

/// Splits `map` into `M×M` windows, after a cyclic roll when `shifted`.
/// Returns the windows and the index needed to undo the partition.
pub fn window_partition_shift(map: &FeatureMap, cfg: &WindowConfig, shifted: bool) -> Result<(Vec<Window>, WindowIndex)> {
    cfg.validate()?;
    let shift = if shifted { cfg.shift } else { 0 };
    let idx = WindowIndex::new(map.height, map.width, cfg.size, shift)?;
    let hw = map.height * map.width;
    let per_window = idx.tokens_per_window();
    let cols = map.width / cfg.size;
    let windows = idx
        .order
        .chunks_exact(per_window)
        .enumerate()
        .map(|(w, positions)| {
            let mut values = Vec::with_capacity(map.channels * per_window);
            for c in 0..map.channels {
                values.extend(positions.iter().map(|&p| map.values[c * hw + p]));
            }
            Window {
                row: w / cols,
                col: w % cols,
                values,
            }
        })
        .collect();
    Ok((windows, idx))
}

/// Inverse of [`window_partition_shift`].
pub fn window_reverse(windows: &[Window], idx: &WindowIndex, channels: usize) -> Result<Vec<f64>> {
    let per_window = idx.tokens_per_window();
    if windows.len() != idx.windows() || windows.iter().any(|w| w.values.len() != channels * per_window) {
        return Err(Error::dim("window_reverse", &[windows.len()], &[idx.windows()]));
    }
    let hw = idx.height * idx.width;
    let mut out = vec![0.0; channels * hw];
    for (w, win) in windows.iter().enumerate() {
        for t in 0..per_window {
            let pos = idx.order[w * per_window + t];
            for c in 0..channels {
                out[c * hw + pos] = win.values[c * per_window + t];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BranchId;

    fn map4() -> FeatureMap {
        FeatureMap::new(BranchId::Mg, 2, 4, 4, (0..32).map(f64::from).collect()).unwrap()
    }

    #[test]
    fn unshifted_tiles_partition_the_map() {
        let (wins, idx) = window_partition_shift(&map4(), &WindowConfig::new(2), false).unwrap();
        assert_eq!(wins.len(), 4);
        let mut seen = idx.order.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..16).collect::<Vec<_>>());
        // first tile of channel 0 is rows 0..2, cols 0..2
        assert_eq!(&wins[0].values[..4], &[0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn shifted_first_tile_starts_at_pre_roll_one_one() {
        let cfg = WindowConfig { shift: 1, ..WindowConfig::new(2) };
        let (wins, idx) = window_partition_shift(&map4(), &cfg, true).unwrap();
        // rolled (0,0) is original (1,1); tile 0 holds (1,1),(1,2),(2,1),(2,2)
        assert_eq!(&idx.order[..4], &[5, 6, 9, 10]);
        assert_eq!(&wins[0].values[..4], &[5.0, 6.0, 9.0, 10.0]);
        // the wrapped tile holds the corners of the original map
        assert_eq!(&idx.order[12..16], &[15, 12, 3, 0]);
    }

    #[test]
    fn round_trip_exact() {
        let m = map4();
        for shifted in [false, true] {
            let (wins, idx) = window_partition_shift(&m, &WindowConfig::new(2), shifted).unwrap();
            assert_eq!(window_reverse(&wins, &idx, 2).unwrap(), m.values);
        }
    }

    #[test]
    fn shift_must_be_below_window() {
        let cfg = WindowConfig { shift: 2, ..WindowConfig::new(2) };
        assert!(matches!(window_partition_shift(&map4(), &cfg, true), Err(Error::Config(_))));
    }

    #[test]
    fn merge_groups_neighbours() {
        let idx = merge_index(4, 4, 1).unwrap();
        assert_eq!(&idx[..4], &[0, 4, 1, 5]);
        assert_eq!(&idx[4..8], &[2, 6, 3, 7]);
        assert!(merge_index(3, 4, 1).is_err());
    }
}
