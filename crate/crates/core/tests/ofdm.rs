use cbodd_core::config::{BranchId, CrossMode, HeadSharing, OfdmConfig};
use cbodd_core::ofdm::{branch_ortho_loss, cross_ortho_loss, ortho_efficacy, ortho_grad_check, BatchPair, ProjectionHeads};
use cbodd_core::tensor::gradcheck;
use cbodd_core::tensor::{DiffArray, Graph, ParamStore, Var};
use cbodd_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arr(shape: &[usize], v: &[f64]) -> DiffArray {
    DiffArray::new(shape.to_vec(), v.to_vec()).unwrap()
}

fn heads(d: usize, ds: usize, dd: usize) -> (ProjectionHeads, ParamStore) {
    let mut store = ParamStore::new();
    let cfg = OfdmConfig {
        shared_dim: ds,
        disentangled_dim: dd,
        ..OfdmConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = ProjectionHeads::new(&mut store, &cfg, d, &BranchId::ALL, &mut rng).unwrap();
    (h, store)
}

#[test]
fn zero_embedding_projects_to_zero_pair() {
    let (h, store) = heads(8, 2, 3);
    let g = Graph::new();
    let p = h.project(&g, &store, BranchId::Ls, g.input(&DiffArray::zeros([1, 8]))).unwrap();
    assert_eq!(p.shared.value(), vec![0.0; 2]);
    assert_eq!(p.disentangled.value(), vec![0.0; 3]);
}

#[test]
fn row_selection_heads_pick_coordinates() {
    let (h, mut store) = heads(4, 1, 2);
    // shared picks coordinate 2, disentangled picks 0 and 3
    let mut s = vec![0.0; 4];
    s[2] = 1.0;
    let mut u = vec![0.0; 8];
    u[0] = 1.0;
    u[3 * 2 + 1] = 1.0;
    store.get_mut(h.shared[0].weight).values_mut().copy_from_slice(&s);
    store.get_mut(h.disentangled[0].weight).values_mut().copy_from_slice(&u);
    let g = Graph::new();
    let p = h.project(&g, &store, BranchId::Mg, g.input(&arr(&[1, 4], &[5., 6., 7., 8.]))).unwrap();
    assert_eq!(p.shared.value(), vec![7.0]);
    assert_eq!(p.disentangled.value(), vec![5.0, 8.0]);
}

#[test]
fn projection_matches_hand_matrix_vector_products() {
    let (h, store) = heads(8, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let g = Graph::new();
    let p = h.project(&g, &store, BranchId::Ce, g.input(&arr(&[1, 8], &f))).unwrap();
    for (lin, out) in [(&h.shared[0], p.shared.value()), (&h.disentangled[0], p.disentangled.value())] {
        let w = store.get(lin.weight).values();
        for (j, o) in out.iter().enumerate() {
            let hand: f64 = (0..8).map(|i| f[i] * w[i * lin.out_dim + j]).sum();
            assert!((o - hand).abs() < 1e-15);
        }
    }
}

#[test]
fn projection_rejects_wrong_width() {
    let (h, store) = heads(8, 2, 3);
    let g = Graph::new();
    assert!(matches!(
        h.project(&g, &store, BranchId::Ls, g.input(&DiffArray::zeros([1, 7]))),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn per_branch_heads_are_distinct() {
    let mut store = ParamStore::new();
    let cfg = OfdmConfig {
        sharing: HeadSharing::PerBranch,
        ..OfdmConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = ProjectionHeads::new(&mut store, &cfg, 8, &BranchId::ALL, &mut rng).unwrap();
    assert_eq!(h.shared.len(), 3);
    assert_eq!(h.param_count(), 3 * 8 * (cfg.shared_dim + cfg.disentangled_dim));
}

fn pair<'g>(g: &'g Graph, branch: BranchId, s: (&[usize], &[f64]), u: (&[usize], &[f64])) -> BatchPair<'g> {
    BatchPair {
        branch,
        shared: g.input(&arr(s.0, s.1)),
        disentangled: g.input(&arr(u.0, u.1)),
    }
}

#[test]
fn branch_loss_hand_example() {
    let g = Graph::new();
    let p = pair(&g, BranchId::Ls, (&[2, 2], &[1., 0., 0., 1.]), (&[2, 2], &[0., 1., 1., 0.]));
    assert_eq!(branch_ortho_loss(&[p], false).unwrap().item(), 0.5);
}

#[test]
fn branch_loss_batch_orthogonal_columns() {
    let g = Graph::new();
    let p = pair(&g, BranchId::Ls, (&[2, 1], &[1., 1.]), (&[2, 1], &[1., -1.]));
    assert_eq!(branch_ortho_loss(&[p], false).unwrap().item(), 0.0);
}

#[test]
fn branch_loss_zero_disentangled_contributes_nothing() {
    let g = Graph::new();
    let a = pair(&g, BranchId::Ls, (&[2, 2], &[1., 0., 0., 1.]), (&[2, 2], &[0., 1., 1., 0.]));
    let b = pair(&g, BranchId::Mg, (&[2, 2], &[3., 1., 4., 1.]), (&[2, 2], &[0.; 4]));
    assert_eq!(branch_ortho_loss(&[a, b], false).unwrap().item(), 0.5);
}

#[test]
fn cross_loss_hand_examples() {
    let g = Graph::new();
    let id = |b| pair(&g, b, (&[2, 2], &[1., 0., 0., 1.]), (&[2, 1], &[0., 0.]));
    let pairs = [id(BranchId::Ls), id(BranchId::Mg), id(BranchId::Ce)];
    assert_eq!(cross_ortho_loss(&pairs, false, CrossMode::Batched).unwrap().item(), 1.5);

    let zero = |b| pair(&g, b, (&[2, 2], &[0.; 4]), (&[2, 1], &[1., 1.]));
    let pairs = [zero(BranchId::Ls), zero(BranchId::Mg), zero(BranchId::Ce)];
    assert_eq!(cross_ortho_loss(&pairs, false, CrossMode::Batched).unwrap().item(), 0.0);

    // batch columns [1,1,0,0] and [0,0,1,1] span orthogonal directions
    let a = pair(&g, BranchId::Ls, (&[4, 1], &[1., 1., 0., 0.]), (&[4, 1], &[0.; 4]));
    let b = pair(&g, BranchId::Mg, (&[4, 1], &[0., 0., 1., 1.]), (&[4, 1], &[0.; 4]));
    assert_eq!(cross_ortho_loss(&[a, b], false, CrossMode::Batched).unwrap().item(), 0.0);
}

#[test]
fn cross_loss_single_branch_is_zero() {
    let g = Graph::new();
    let a = pair(&g, BranchId::Ls, (&[2, 2], &[1., 2., 3., 4.]), (&[2, 1], &[1., 1.]));
    assert_eq!(cross_ortho_loss(&[a], false, CrossMode::Batched).unwrap().item(), 0.0);
}

#[test]
fn per_sample_cross_mode_hand_example() {
    let g = Graph::new();
    // per-sample dots: row 0 → 1·2 + 0·0 = 2, row 1 → 1·1 + 1·1 = 2
    let a = pair(&g, BranchId::Ls, (&[2, 2], &[1., 0., 1., 1.]), (&[2, 1], &[0., 0.]));
    let b = pair(&g, BranchId::Mg, (&[2, 2], &[2., 5., 1., 1.]), (&[2, 1], &[0., 0.]));
    assert_eq!(cross_ortho_loss(&[a, b], false, CrossMode::PerSample).unwrap().item(), (4.0 + 4.0) / 2.0);
}

#[test]
fn centering_removes_a_common_offset() {
    let g = Graph::new();
    let p = pair(&g, BranchId::Ls, (&[2, 1], &[5., 5.]), (&[2, 1], &[3., 3.]));
    assert!(branch_ortho_loss(&[p], false).unwrap().item() > 0.0);
    assert_eq!(branch_ortho_loss(&[p], true).unwrap().item(), 0.0);
}

#[test]
fn mismatched_batches_are_rejected() {
    let g = Graph::new();
    let a = pair(&g, BranchId::Ls, (&[2, 1], &[1., 1.]), (&[2, 1], &[1., 1.]));
    let b = pair(&g, BranchId::Mg, (&[3, 1], &[1., 1., 1.]), (&[3, 1], &[1., 1., 1.]));
    assert!(matches!(branch_ortho_loss(&[a, b], false), Err(Error::Batch(_))));
    assert!(matches!(branch_ortho_loss(&[], false), Err(Error::Batch(_))));
}

#[test]
fn gradient_check_suite_passes() {
    let report = ortho_grad_check(0, 0.4, 0.25, None).unwrap();
    let names: Vec<&str> = report.entries.iter().map(|e| e.0.as_str()).collect();
    assert_eq!(names, ["l_cls", "l_branch_ortho", "l_cross_ortho", "total"]);
    assert!(report.max_rel_error() < 1e-4, "{report:?}");
}

#[test]
fn gradient_check_fault_hook_is_detected() {
    let report = ortho_grad_check(0, 0.4, 0.25, Some(1e-3)).unwrap();
    assert_eq!(report.failing(1e-4).len(), 4);
}

fn three_pairs<'g>(v: &[Var<'g>]) -> cbodd_core::Result<Vec<BatchPair<'g>>> {
    v[..3]
        .iter()
        .zip(BranchId::ALL)
        .map(|(&e, branch)| {
            Ok(BatchPair {
                branch,
                shared: e.matmul(v[3])?,
                disentangled: e.matmul(v[4])?,
            })
        })
        .collect()
}

#[test]
fn zero_inputs_give_zero_gradients() {
    let inputs = vec![
        DiffArray::zeros([6, 16]),
        DiffArray::zeros([6, 16]),
        DiffArray::zeros([6, 16]),
        DiffArray::zeros([16, 4]),
        DiffArray::zeros([16, 8]),
    ];
    let rep = gradcheck::check(&inputs, 1e-4, None, |_, v| {
        let p = three_pairs(v)?;
        branch_ortho_loss(&p, false)?.add(cross_ortho_loss(&p, false, CrossMode::Batched)?)
    })
    .unwrap();
    assert!(rep.analytic.iter().flatten().all(|&d| d == 0.0));
}

#[test]
fn doubling_lambda_doubles_the_branch_gradient_contribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut rand = |shape: [usize; 2]| DiffArray::new(shape, (0..shape[0] * shape[1]).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let inputs = vec![rand([6, 16]), rand([6, 16]), rand([6, 16]), rand([16, 4]), rand([16, 8])];
    let grad = |lambda: f64| {
        let g = Graph::new();
        let tracked: Vec<DiffArray> = inputs.iter().cloned().map(DiffArray::with_grad).collect();
        let v: Vec<Var<'_>> = tracked.iter().map(|a| g.input(a)).collect();
        let loss = branch_ortho_loss(&three_pairs(&v).unwrap(), false).unwrap().scale(lambda);
        g.backward(loss).unwrap().wrt(v[3]).unwrap().to_vec()
    };
    let (one, two) = (grad(0.4), grad(0.8));
    for (a, b) in one.iter().zip(&two) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn ortho_descent_drives_both_losses_below_one_percent() {
    let r = ortho_efficacy(0, 500, 1e-2).unwrap();
    assert!(r.branch_ratio() < 0.01, "{r:?}");
    assert!(r.cross_ratio() < 0.01, "{r:?}");
}

fn loss_values(s: &[Vec<f64>], u: &[Vec<f64>], b: usize, ds: usize, dd: usize) -> (f64, f64) {
    let g = Graph::new();
    let pairs: Vec<BatchPair<'_>> = s
        .iter()
        .zip(u)
        .zip(BranchId::ALL)
        .map(|((s, u), branch)| BatchPair {
            branch,
            shared: g.input(&arr(&[b, ds], s)),
            disentangled: g.input(&arr(&[b, dd], u)),
        })
        .collect();
    (
        branch_ortho_loss(&pairs, false).unwrap().item(),
        cross_ortho_loss(&pairs, false, CrossMode::Batched).unwrap().item(),
    )
}

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn losses_are_non_negative_permutation_invariant_and_scale_equivariant(
        seed in any::<u64>(), b in 1usize..7, ds in 1usize..4, dd in 1usize..4, c in -3.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let s: Vec<Vec<f64>> = (0..3).map(|_| m(b * ds)).collect();
        let u: Vec<Vec<f64>> = (0..3).map(|_| m(b * dd)).collect();
        let (lb, lc) = loss_values(&s, &u, b, ds, dd);
        prop_assert!(lb >= 0.0 && lc >= 0.0);

        // reverse the batch order in every matrix
        let rev = |x: &Vec<f64>, w: usize| x.chunks(w).rev().flatten().copied().collect::<Vec<f64>>();
        let sp: Vec<Vec<f64>> = s.iter().map(|x| rev(x, ds)).collect();
        let up: Vec<Vec<f64>> = u.iter().map(|x| rev(x, dd)).collect();
        let (pb, pc) = loss_values(&sp, &up, b, ds, dd);
        prop_assert!(rel_close(lb, pb) && rel_close(lc, pc));

        // scaling LS shared vectors by c scales the LS-involving cross terms by c²
        let only = |i: usize, j: usize, s: &[Vec<f64>]| {
            let g = Graph::new();
            let a = g.input(&arr(&[b, ds], &s[i]));
            let bb = g.input(&arr(&[b, ds], &s[j]));
            a.transpose().unwrap().matmul(bb).unwrap().sq_frobenius().item() / (b * b) as f64
        };
        let mut scaled = s.clone();
        scaled[0].iter_mut().for_each(|x| *x *= c);
        let (_, sc) = loss_values(&scaled, &u, b, ds, dd);
        let expected = c * c * (only(0, 1, &s) + only(0, 2, &s)) + only(1, 2, &s);
        prop_assert!((sc - expected).abs() <= 1e-10 * expected.abs().max(1e-12));
    }
}
