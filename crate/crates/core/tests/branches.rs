use std::rc::Rc;

use cbodd_core::branches::{
    adaptive_avg_pool, window_partition_shift, window_reverse, BranchEncoder, ConvBackbone, FeatureMap, Frame, MgBackbone,
    SegmentAttention, WindowConfig,
};
use cbodd_core::config::{BranchId, ConvBranchConfig, MgConfig, RunConfig};
use cbodd_core::tensor::gradcheck::{self, rel_error, FD_STEP};
use cbodd_core::tensor::{DiffArray, Graph, ParamStore};
use cbodd_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(BranchId::Ls, c, h, w, (0..c * h * w).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap()
}

/// Direct evaluation: mean over rows `⌊iH/k⌋..⌊(i+1)H/k⌋` and the same for columns.
fn pool_oracle(m: &FeatureMap, kh: usize, kw: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..kh {
        for j in 0..kw {
            for c in 0..m.channels {
                let (r0, r1) = (i * m.height / kh, (i + 1) * m.height / kh);
                let (c0, c1) = (j * m.width / kw, (j + 1) * m.width / kw);
                let mut s = 0.0;
                for y in r0..r1 {
                    for x in c0..c1 {
                        s += m.values[(c * m.height + y) * m.width + x];
                    }
                }
                out.push(s / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    }
    out
}

#[test]
fn adaptive_pool_matches_direct_oracle_on_random_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(1..12), rng.gen_range(1..12));
        let (kh, kw) = (rng.gen_range(1..=h), rng.gen_range(1..=w));
        let m = random_map(&mut rng, c, h, w);
        let grid = adaptive_avg_pool(&m, kh, kw).unwrap();
        for (a, b) in grid.segments.iter().zip(pool_oracle(&m, kh, kw)) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn adaptive_pool_windows_partition_the_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let (h, w) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let (kh, kw) = (rng.gen_range(1..=h), rng.gen_range(1..=w));
        let m = random_map(&mut rng, 1, h, w);
        let grid = adaptive_avg_pool(&m, kh, kw).unwrap();
        let mut weighted = 0.0;
        for i in 0..kh {
            for j in 0..kw {
                let area = ((i + 1) * h / kh - i * h / kh) * ((j + 1) * w / kw - j * w / kw);
                weighted += grid.segment(i * kw + j)[0] * area as f64;
            }
        }
        let total: f64 = m.values.iter().sum();
        assert!((weighted - total).abs() < 1e-9);
    }
}

#[test]
fn adaptive_pool_rejects_oversize_grid() {
    let m = FeatureMap::new(BranchId::Ls, 1, 2, 2, vec![0.0; 4]).unwrap();
    assert!(matches!(adaptive_avg_pool(&m, 3, 1), Err(Error::Dimension { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn window_partition_round_trips(seed in any::<u64>(), tiles in 1usize..4, size in 1usize..5, c in 1usize..3, shifted in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = tiles * size;
        let map = random_map(&mut rng, c, side, side);
        let cfg = WindowConfig::new(size);
        let (windows, index) = window_partition_shift(&map, &cfg, shifted).unwrap();
        prop_assert_eq!(windows.len(), tiles * tiles);
        let back = window_reverse(&windows, &index, c).unwrap();
        prop_assert_eq!(back, map.values);
    }
}

fn frame(values: Vec<f64>, side: usize) -> Frame {
    Frame::new("t", 0, 3, side, side, values).unwrap()
}

fn random_frame(rng: &mut ChaCha8Rng, side: usize) -> Frame {
    frame((0..3 * side * side).map(|_| rng.gen_range(0.0..1.0)).collect(), side)
}

fn conv_grid(b: &ConvBackbone, store: &ParamStore, f: &Frame) -> Vec<f64> {
    let g = Graph::new();
    let x = g.input(&DiffArray::new([1, 3, f.height, f.width], f.pixels.clone()).unwrap());
    b.forward(&g, store, x).unwrap().value()
}

#[test]
fn ls_grid_shape_and_zero_frame() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = ConvBackbone::new(&mut store, "ls", 3, &ConvBranchConfig::default(), &mut rng);
    let g = Graph::new();
    let x = g.input(&DiffArray::zeros([2, 3, 32, 32]));
    let y = b.forward(&g, &store, x).unwrap();
    assert_eq!(y.shape(), vec![2, 4, 16]);
    assert!(y.value().iter().all(|v| v.is_finite()));
}

/// Input rows (or columns) that can influence output index `o` of a stack of
/// `k×k` convolutions with padding `k/2` and the given strides.
fn receptive_interval(o: usize, kernel: usize, strides: &[usize]) -> (i64, i64) {
    let pad = (kernel / 2) as i64;
    let (mut lo, mut hi) = (o as i64, o as i64);
    for &s in strides.iter().rev() {
        lo = lo * s as i64 - pad;
        hi = hi * s as i64 - pad + kernel as i64 - 1;
    }
    (lo, hi)
}

#[test]
fn local_patch_only_changes_segments_whose_receptive_field_covers_it() {
    let cfg = ConvBranchConfig::default();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = ConvBackbone::new(&mut store, "ls", 3, &cfg, &mut rng);
    let base = random_frame(&mut rng, 32);
    let mut patched = base.clone();
    let (py, px) = (3..6, 24..28);
    for c in 0..3 {
        for y in py.clone() {
            for x in px.clone() {
                patched.pixels[(c * 32 + y) * 32 + x] = 1.0 - patched.pixels[(c * 32 + y) * 32 + x];
            }
        }
    }
    let (a, p) = (conv_grid(&b, &store, &base), conv_grid(&b, &store, &patched));
    // final map 8×8 pooled to 2×2: segment (i, j) covers output rows 4i..4i+4
    let c_out = 16;
    let mut changed = Vec::new();
    for i in 0..2 {
        for j in 0..2 {
            let s = i * 2 + j;
            let rows = (receptive_interval(4 * i, 3, &cfg.strides).0, receptive_interval(4 * i + 3, 3, &cfg.strides).1);
            let cols = (receptive_interval(4 * j, 3, &cfg.strides).0, receptive_interval(4 * j + 3, 3, &cfg.strides).1);
            let covers = rows.0 <= 5 && rows.1 >= 3 && cols.0 <= 27 && cols.1 >= 24;
            let differs = a[s * c_out..(s + 1) * c_out] != p[s * c_out..(s + 1) * c_out];
            if !covers {
                assert!(!differs, "segment {s} changed outside its receptive field");
            }
            if differs {
                changed.push(s);
            }
        }
    }
    assert_eq!(changed, vec![1]);
}

fn small_mg(shift: usize, depth: usize) -> MgConfig {
    MgConfig {
        patch: 2,
        embed: 8,
        window: 2,
        shift,
        heads: 2,
        depth,
        grid: [2, 2],
    }
}

#[test]
fn mg_extent_halves_per_merge() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = MgConfig { patch: 1, ..small_mg(1, 2) };
    let b = MgBackbone::new(&mut store, "mg", 3, 16, &cfg, &mut rng).unwrap();
    assert_eq!(b.out_side(), 8);
    assert_eq!(b.out_channels(), 16);
    let g = Graph::new();
    let x = g.input(&DiffArray::zeros([1, 3, 16, 16]));
    assert_eq!(b.feature_map(&g, &store, x).unwrap().shape(), vec![1, 16, 8, 8]);
    assert_eq!(b.forward(&g, &store, x).unwrap().shape(), vec![1, 4, 16]);
}

#[test]
fn mg_rejects_indivisible_window() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = MgConfig { window: 3, ..small_mg(1, 1) };
    assert!(matches!(MgBackbone::new(&mut store, "mg", 3, 16, &cfg, &mut rng), Err(Error::Config(_))));
}

#[test]
fn unshifted_single_stage_attends_only_within_windows() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // 16×16 input, patch 2 → 8×8 tokens, windows of 2×2 tokens = 4×4 pixels
    let b = MgBackbone::new(&mut store, "mg", 3, 16, &small_mg(0, 1), &mut rng).unwrap();
    let base = random_frame(&mut rng, 16);
    let mut other = base.clone();
    // shuffle the pixels of window (0, 1): rows 0..4, cols 4..8
    let mut cells: Vec<(usize, usize)> = (0..4).flat_map(|y| (4..8).map(move |x| (y, x))).collect();
    cells.reverse();
    for (k, (y, x)) in (0..4).flat_map(|y| (4..8).map(move |x| (y, x))).enumerate() {
        for c in 0..3 {
            other.pixels[(c * 16 + y) * 16 + x] = base.pixels[(c * 16 + cells[k].0) * 16 + cells[k].1];
        }
    }
    let fmap = |f: &Frame| {
        let g = Graph::new();
        let x = g.input(&DiffArray::new([1, 3, 16, 16], f.pixels.clone()).unwrap());
        b.feature_map(&g, &store, x).unwrap().value()
    };
    let (a, o) = (fmap(&base), fmap(&other));
    let c = b.out_channels();
    for ch in 0..c {
        for y in 0..8 {
            for x in 0..8 {
                let i = (ch * 8 + y) * 8 + x;
                let inside = y < 2 && (2..4).contains(&x);
                if !inside {
                    assert_eq!(a[i], o[i], "token ({y},{x}) saw another window");
                }
            }
        }
    }
    assert_ne!(a, o);
}

#[test]
fn identical_frames_give_identical_embeddings() {
    let cfg = RunConfig::desk();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let enc = BranchEncoder::new(&mut store, BranchId::Mg, &cfg, &mut rng).unwrap();
    let f = random_frame(&mut rng, 32);
    let g = Graph::new();
    let mut both = f.pixels.clone();
    both.extend_from_slice(&f.pixels);
    let x = g.input(&DiffArray::new([2, 3, 32, 32], both).unwrap());
    let emb = enc.attention.forward(&g, &store, enc.segments(&g, &store, x).unwrap()).unwrap().pooled.value();
    let d = cfg.attention.embed_dim;
    assert_eq!(emb.len(), 2 * d);
    assert_eq!(emb[..d], emb[d..]);
}

#[test]
fn ce_shape_matches_ls_and_zero_frame_is_finite() {
    let cfg = RunConfig::desk();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ce = BranchEncoder::new(&mut store, BranchId::Ce, &cfg, &mut rng).unwrap();
    let ls = BranchEncoder::new(&mut store, BranchId::Ls, &cfg, &mut rng).unwrap();
    let g = Graph::new();
    let x = g.input(&DiffArray::zeros([1, 3, 32, 32]));
    let (a, b) = (ce.segments(&g, &store, x).unwrap(), ls.segments(&g, &store, x).unwrap());
    assert_eq!(a.shape(), b.shape());
    let expr = ce.expression.as_ref().unwrap().forward(&g, &store, a).unwrap();
    assert_eq!(expr.shape(), vec![1]);
    assert!(a.value().iter().chain(&expr.value()).all(|v| v.is_finite()));
}

#[test]
fn all_branches_emit_the_configured_dimension() {
    let cfg = RunConfig::desk();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = Graph::new();
    let x = g.input(&DiffArray::zeros([3, 3, 32, 32]));
    for id in BranchId::ALL {
        let enc = BranchEncoder::new(&mut store, id, &cfg, &mut rng).unwrap();
        let pooled = enc.attention.forward(&g, &store, enc.segments(&g, &store, x).unwrap()).unwrap().pooled;
        assert_eq!(pooled.shape(), vec![3, cfg.attention.embed_dim]);
    }
}

fn attention(channels: usize, dim: usize, heads: usize) -> (SegmentAttention, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = SegmentAttention::new(&mut store, "sa", channels, dim, heads, &mut rng).unwrap();
    (a, store)
}

#[test]
fn segment_attention_single_segment_pool_is_identity() {
    let (a, store) = attention(5, 8, 2);
    let g = Graph::new();
    let x = g.input(&DiffArray::new([1, 1, 5], vec![0.3, -1.0, 2.0, 0.5, 0.1]).unwrap());
    let out = a.forward(&g, &store, x).unwrap();
    assert_eq!(out.pooled.value(), out.transformed.value());
}

#[test]
fn segment_attention_identical_segments_attend_uniformly() {
    let (a, store) = attention(4, 8, 4);
    let g = Graph::new();
    let row = [0.2, -0.7, 1.1, 0.4];
    let x = g.input(&DiffArray::new([1, 3, 4], row.repeat(3)).unwrap());
    let w = a.forward(&g, &store, x).unwrap().weights.value();
    assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn segment_attention_pool_is_mean_of_transformed_rows() {
    let (a, store) = attention(3, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = Graph::new();
    let x = g.input(&DiffArray::new([1, 3, 3], (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
    let out = a.forward(&g, &store, x).unwrap();
    let t = out.transformed.value();
    for (d, p) in out.pooled.value().iter().enumerate() {
        let hand = (t[d] + t[8 + d] + t[16 + d]) / 3.0;
        assert!((p - hand).abs() < 1e-15);
    }
}

#[test]
fn segment_attention_rejects_indivisible_heads() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    assert!(matches!(SegmentAttention::new(&mut store, "sa", 4, 10, 4, &mut rng), Err(Error::Config(_))));
}

fn toy_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.input.size = 8;
    cfg.mg = small_mg(1, 2);
    cfg.attention.embed_dim = 8;
    cfg.attention.heads = 2;
    cfg
}

/// Scalar probe of one branch: weighted sum of the pooled embedding.
fn branch_probe(enc: &BranchEncoder, store: &ParamStore, x: &DiffArray, w: &[f64]) -> f64 {
    let g = Graph::new();
    let pooled = enc.attention.forward(&g, store, enc.segments(&g, store, g.input(x)).unwrap()).unwrap().pooled;
    pooled.value().iter().zip(w).map(|(a, b)| a * b).sum()
}

#[test]
fn gradients_flow_end_to_end_through_each_branch() {
    let cfg = toy_config();
    for id in BranchId::ALL {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let enc = BranchEncoder::new(&mut store, id, &cfg, &mut rng).unwrap();
        let x = DiffArray::new([1, 3, 8, 8], (0..192).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w: Rc<[f64]> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let wc = Rc::clone(&w);
        let report = gradcheck::check(&[x.clone()], FD_STEP, None, |g, v| {
            let pooled = enc.attention.forward(g, &store, enc.segments(g, &store, v[0])?)?.pooled;
            pooled.mul(g.constant(vec![1, 8], wc.to_vec())?).map(|p| p.sum_all())
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{id} input: {}", report.max_rel_error);

        // parameters: first, middle and last tensors on the embedding path
        let g = Graph::new();
        let xin = g.input(&x);
        let pooled = enc.attention.forward(&g, &store, enc.segments(&g, &store, xin).unwrap()).unwrap().pooled;
        let loss = pooled.mul(g.constant(vec![1, 8], w.to_vec()).unwrap()).unwrap().sum_all();
        let grads = g.backward(loss).unwrap();
        let mut with_grads = store.clone();
        with_grads.zero_grad();
        grads.accumulate_into(&mut with_grads).unwrap();
        let ids: Vec<_> = store.ids().filter(|&p| !store.name(p).contains("expression")).collect();
        for &pid in [ids[0], ids[ids.len() / 2], ids[ids.len() - 1]].iter() {
            let analytic = with_grads.get(pid).grad().unwrap().to_vec();
            for k in (0..analytic.len()).step_by((analytic.len() / 6).max(1)) {
                let mut plus = store.clone();
                plus.get_mut(pid).values_mut()[k] += FD_STEP;
                let mut minus = store.clone();
                minus.get_mut(pid).values_mut()[k] -= FD_STEP;
                let numeric = (branch_probe(&enc, &plus, &x, &w) - branch_probe(&enc, &minus, &x, &w)) / (2.0 * FD_STEP);
                let err = rel_error(analytic[k], numeric);
                assert!(err < 1e-4, "{id} {} [{k}]: {} vs {numeric}", store.name(pid), analytic[k]);
            }
        }
    }
}
