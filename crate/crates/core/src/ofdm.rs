//! Shared/disentangled projections and the orthogonality penalties.
//!
//! With `S` the `B×d_s` batch of shared vectors and `U` the `B×d_d` batch of
//! disentangled vectors of one branch, the branch term is `‖SᵀU‖²_F / B²`
//! summed over branches and the cross term is `‖S_iᵀS_j‖²_F / B²` summed over
//! unordered branch pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{BranchId, CrossMode, HeadSharing, OfdmConfig};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::gradcheck::{self, FD_STEP};
use crate::tensor::{DiffArray, Graph, ParamStore, Var};

/// `P_shared: D → d_s` and `P_disentangled: D → d_d`, bias-free.
#[derive(Clone, Debug)]
pub struct ProjectionHeads {
    pub sharing: HeadSharing,
    /// One entry in shared mode, one per branch otherwise.
    pub shared: Vec<Linear>,
    pub disentangled: Vec<Linear>,
    pub branches: Vec<BranchId>,
    pub dim: usize,
}

impl ProjectionHeads {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &OfdmConfig, dim: usize, branches: &[BranchId], rng: &mut R) -> Result<Self> {
        if cfg.shared_dim == 0 || cfg.disentangled_dim == 0 || dim == 0 {
            return Err(Error::Config("projection dimensions must be positive".into()));
        }
        let names: Vec<String> = match cfg.sharing {
            HeadSharing::Shared => vec!["ofdm".into()],
            HeadSharing::PerBranch => branches.iter().map(|b| format!("ofdm.{}", b.as_str().to_ascii_lowercase())).collect(),
        };
        let mut shared = Vec::with_capacity(names.len());
        let mut disentangled = Vec::with_capacity(names.len());
        for n in &names {
            shared.push(Linear::new(store, &format!("{n}.shared"), dim, cfg.shared_dim, false, rng));
            disentangled.push(Linear::new(store, &format!("{n}.disentangled"), dim, cfg.disentangled_dim, false, rng));
        }
        Ok(Self {
            sharing: cfg.sharing,
            shared,
            disentangled,
            branches: branches.to_vec(),
            dim,
        })
    }

    pub fn shared_dim(&self) -> usize {
        self.shared[0].out_dim
    }

    pub fn disentangled_dim(&self) -> usize {
        self.disentangled[0].out_dim
    }

    fn slot(&self, branch: BranchId) -> Result<usize> {
        match self.sharing {
            HeadSharing::Shared => Ok(0),
            HeadSharing::PerBranch => self
                .branches
                .iter()
                .position(|&b| b == branch)
                .ok_or_else(|| Error::Completeness(format!("no projection heads for branch {branch}"))),
        }
    }

    /// `embedding` is `[B, D]`.
    pub fn project<'g>(&self, g: &'g Graph, store: &ParamStore, branch: BranchId, embedding: Var<'g>) -> Result<BatchPair<'g>> {
        let s = embedding.shape();
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::dim("project", &s, &[self.dim]));
        }
        let k = self.slot(branch)?;
        Ok(BatchPair {
            branch,
            shared: self.shared[k].forward(g, store, embedding)?,
            disentangled: self.disentangled[k].forward(g, store, embedding)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.shared.iter().chain(&self.disentangled).map(Linear::param_count).sum()
    }
}

/// Shared and disentangled components of one frame from one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct DisentangledPair {
    pub branch: BranchId,
    pub shared: Vec<f64>,
    pub disentangled: Vec<f64>,
}

/// A batch of pairs for one branch: `shared` is `[B, d_s]`, `disentangled` `[B, d_d]`.
#[derive(Clone, Copy, Debug)]
pub struct BatchPair<'g> {
    pub branch: BranchId,
    pub shared: Var<'g>,
    pub disentangled: Var<'g>,
}

impl BatchPair<'_> {
    pub fn batch(&self) -> usize {
        self.shared.shape()[0]
    }

    /// Splits the batch into per-frame pairs.
    pub fn unbatch(&self) -> Vec<DisentangledPair> {
        let (s, u) = (self.shared.value(), self.disentangled.value());
        let b = self.batch();
        let (ds, dd) = (s.len() / b, u.len() / b);
        (0..b)
            .map(|i| DisentangledPair {
                branch: self.branch,
                shared: s[i * ds..(i + 1) * ds].to_vec(),
                disentangled: u[i * dd..(i + 1) * dd].to_vec(),
            })
            .collect()
    }
}

fn check_batch(pairs: &[BatchPair<'_>]) -> Result<usize> {
    let first = pairs.first().ok_or_else(|| Error::Batch("no branches".into()))?;
    let b = first.batch();
    if b == 0 {
        return Err(Error::Batch("empty batch".into()));
    }
    for p in pairs {
        if p.shared.shape()[0] != b || p.disentangled.shape()[0] != b {
            return Err(Error::Batch(format!("branch {} has a different batch size", p.branch)));
        }
    }
    Ok(b)
}

fn centered(x: Var<'_>, center: bool) -> Result<Var<'_>> {
    if center {
        x.add_bias(x.mean_axis(0)?.scale(-1.0))
    } else {
        Ok(x)
    }
}

/// `Σ_δ ‖S_δᵀ U_δ‖²_F / B²`.
pub fn branch_ortho_loss<'g>(pairs: &[BatchPair<'g>], center: bool) -> Result<Var<'g>> {
    let b = check_batch(pairs)? as f64;
    let mut total: Option<Var<'g>> = None;
    for p in pairs {
        let s = centered(p.shared, center)?;
        let u = centered(p.disentangled, center)?;
        let term = s.transpose()?.matmul(u)?.sq_frobenius();
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one branch").scale(1.0 / (b * b)))
}

/// Sum over unordered branch pairs of the shared-component penalty.
/// Zero (and detached) with fewer than two branches.
pub fn cross_ortho_loss<'g>(pairs: &[BatchPair<'g>], center: bool, mode: CrossMode) -> Result<Var<'g>> {
    let b = check_batch(pairs)? as f64;
    let g = pairs[0].shared.graph();
    let shared = pairs.iter().map(|p| centered(p.shared, center)).collect::<Result<Vec<_>>>()?;
    let mut total = g.constant(Vec::new(), vec![0.0])?;
    for i in 0..shared.len() {
        for j in i + 1..shared.len() {
            let term = match mode {
                CrossMode::Batched => shared[i].transpose()?.matmul(shared[j])?.sq_frobenius().scale(1.0 / (b * b)),
                CrossMode::PerSample => {
                    let d = shared[i].shape()[1] as f64;
                    let dots = shared[i].mul(shared[j])?.mean_axis(1)?.scale(d);
                    dots.sq_frobenius().scale(1.0 / b)
                }
            };
            total = total.add(term)?;
        }
    }
    Ok(total)
}

/// Maximum relative finite-difference error per loss term.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthoGradReport {
    pub seed: u64,
    pub entries: Vec<(String, f64)>,
}

impl OrthoGradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn failing(&self, tolerance: f64) -> Vec<&str> {
        self.entries.iter().filter(|e| !(e.1 < tolerance)).map(|e| e.0.as_str()).collect()
    }
}

pub const GRADCHECK_DIM: usize = 16;
pub const GRADCHECK_SHARED: usize = 4;
pub const GRADCHECK_DISENTANGLED: usize = 8;
pub const GRADCHECK_BATCH: usize = 6;

/// Finite-difference check of the classification, branch, cross and total
/// losses on random heads, embeddings, classifier and labels.
///
/// Inputs are three `[B, D]` embeddings, the two head matrices, the
/// classifier weight `[3(d_s+d_d), 1]` and bias `[1]`. `fault` is added to
/// every analytic derivative (negative control).
pub fn ortho_grad_check(seed: u64, lambda_branch: f64, lambda_cross: f64, fault: Option<f64>) -> Result<OrthoGradReport> {
    let (d, ds, dd, b) = (GRADCHECK_DIM, GRADCHECK_SHARED, GRADCHECK_DISENTANGLED, GRADCHECK_BATCH);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |shape: Vec<usize>, scale: f64| {
        let n: usize = shape.iter().product();
        DiffArray::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape")
    };
    let mut inputs: Vec<DiffArray> = (0..3).map(|_| uniform(vec![b, d], 1.0)).collect();
    inputs.push(uniform(vec![d, ds], 0.5));
    inputs.push(uniform(vec![d, dd], 0.5));
    inputs.push(uniform(vec![3 * (ds + dd), 1], 0.3));
    inputs.push(uniform(vec![1], 0.3));
    let labels: Vec<f64> = (0..b).map(|i| (i % 2) as f64).collect();

    let mut entries = Vec::with_capacity(4);
    for (name, term) in [
        ("l_cls", Term::Cls),
        ("l_branch_ortho", Term::Branch),
        ("l_cross_ortho", Term::Cross),
        ("total", Term::Total),
    ] {
        let report = gradcheck::check(&inputs, FD_STEP, fault, |g, v| {
            term.eval(g, v, &labels, lambda_branch, lambda_cross)
        })?;
        entries.push((name.to_string(), report.max_rel_error));
    }
    Ok(OrthoGradReport { seed, entries })
}

#[derive(Clone, Copy)]
enum Term {
    Cls,
    Branch,
    Cross,
    Total,
}

impl Term {
    fn eval<'g>(self, _g: &'g Graph, v: &[Var<'g>], labels: &[f64], lb: f64, lc: f64) -> Result<Var<'g>> {
        let pairs = v[..3]
            .iter()
            .zip(BranchId::ALL)
            .map(|(&e, branch)| {
                Ok(BatchPair {
                    branch,
                    shared: e.matmul(v[3])?,
                    disentangled: e.matmul(v[4])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cls = || -> Result<Var<'g>> {
            let fused = crate::detector::fuse(&pairs, &BranchId::ALL)?;
            let b = fused.shape()[0];
            fused.matmul(v[5])?.add_bias(v[6])?.reshape(&[b])?.sigmoid().bce(labels)
        };
        match self {
            Term::Cls => cls(),
            Term::Branch => branch_ortho_loss(&pairs, false),
            Term::Cross => cross_ortho_loss(&pairs, false, CrossMode::Batched),
            Term::Total => {
                let ortho = branch_ortho_loss(&pairs, false)?.scale(lb);
                let cross = cross_ortho_loss(&pairs, false, CrossMode::Batched)?.scale(lc);
                cls()?.add(ortho)?.add(cross)
            }
        }
    }
}

/// Ortho losses before and after descent on the heads alone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EfficacyReport {
    pub initial_branch: f64,
    pub final_branch: f64,
    pub initial_cross: f64,
    pub final_cross: f64,
}

impl EfficacyReport {
    pub fn branch_ratio(&self) -> f64 {
        self.final_branch / self.initial_branch
    }

    pub fn cross_ratio(&self) -> f64 {
        self.final_cross / self.initial_cross
    }
}

/// Freezes random branch embeddings (`B = 32`, `D = 16`, `d_s = 4`,
/// `d_d = 8`) and runs `steps` Adam steps at `lr` on the shared projection
/// heads, minimising the unweighted sum of both orthogonality losses.
pub fn ortho_efficacy(seed: u64, steps: usize, lr: f64) -> Result<EfficacyReport> {
    use crate::tensor::{AdamConfig, OptimState};

    let (b, d) = (32, GRADCHECK_DIM);
    let cfg = OfdmConfig {
        shared_dim: GRADCHECK_SHARED,
        disentangled_dim: GRADCHECK_DISENTANGLED,
        ..OfdmConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features: Vec<DiffArray> = (0..3)
        .map(|_| DiffArray::new([b, d], (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape"))
        .collect();
    let mut store = ParamStore::new();
    let heads = ProjectionHeads::new(&mut store, &cfg, d, &BranchId::ALL, &mut rng)?;
    let adam = AdamConfig {
        learning_rate: lr,
        weight_decay: 0.0,
        step_size: usize::MAX,
        ..AdamConfig::default()
    };
    let mut optim = OptimState::new(adam, &store)?;
    let mut measure = |store: &mut ParamStore, update: bool| -> Result<(f64, f64)> {
        let g = Graph::new();
        let pairs = features
            .iter()
            .zip(BranchId::ALL)
            .map(|(f, branch)| heads.project(&g, store, branch, g.input(f)))
            .collect::<Result<Vec<_>>>()?;
        let lb = branch_ortho_loss(&pairs, false)?;
        let lc = cross_ortho_loss(&pairs, false, CrossMode::Batched)?;
        let out = (lb.item(), lc.item());
        if update {
            let grads = g.backward(lb.add(lc)?)?;
            store.zero_grad();
            grads.accumulate_into(store)?;
            optim.step(store)?;
        }
        Ok(out)
    };
    let (initial_branch, initial_cross) = measure(&mut store, false)?;
    for _ in 0..steps {
        measure(&mut store, true)?;
    }
    let (final_branch, final_cross) = measure(&mut store, false)?;
    Ok(EfficacyReport {
        initial_branch,
        final_branch,
        initial_cross,
        final_cross,
    })
}
