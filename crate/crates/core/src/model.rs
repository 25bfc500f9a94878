//! The assembled detector: branch encoders, projection heads, classifier.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::branches::{frame_batch, BranchEncoder, Frame};
use crate::config::{BranchId, RunConfig};
use crate::detector::{fuse, total_loss, Classifier, LossBreakdown};
use crate::error::{Error, Result};
use crate::ofdm::{branch_ortho_loss, cross_ortho_loss, BatchPair, ProjectionHeads};
use crate::tensor::{checkpoint, DiffArray, Graph, ParamStore, Var};

/// Name of the checkpoint record carrying the config digest.
pub const DIGEST_RECORD: &str = "meta.config_digest";

pub struct CbodModel {
    pub config: RunConfig,
    pub store: ParamStore,
    pub encoders: Vec<BranchEncoder>,
    pub heads: ProjectionHeads,
    pub classifier: Classifier,
}

/// Everything one forward pass produces for a batch of frames.
pub struct Forward<'g> {
    pub embeddings: Vec<Var<'g>>,
    pub pairs: Vec<BatchPair<'g>>,
    pub fused: Var<'g>,
    pub probs: Var<'g>,
    /// CE expression prediction `[B]`, when the CE branch is active.
    pub expression: Option<Var<'g>>,
}

/// Differentiable objective of one batch.
pub struct Objective<'g> {
    /// Breakdown total plus the weighted auxiliary expression loss.
    pub loss: Var<'g>,
    pub breakdown: LossBreakdown,
    pub l_aux: f64,
}

impl CbodModel {
    /// Builds a freshly initialised model; initialisation is a function of
    /// `config.seed` only.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let branches = config.variant.branches();
        let encoders = branches
            .iter()
            .map(|&b| BranchEncoder::new(&mut store, b, config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let heads = ProjectionHeads::new(&mut store, &config.ofdm, config.attention.embed_dim, &branches, &mut rng)?;
        let classifier = Classifier::new(&mut store, config.fused_dim(), &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            encoders,
            heads,
            classifier,
        })
    }

    pub fn branches(&self) -> Vec<BranchId> {
        self.encoders.iter().map(|e| e.id).collect()
    }

    pub fn batch_input(&self, frames: &[&Frame]) -> Result<DiffArray> {
        let input = &self.config.input;
        let mut x = frame_batch(frames, input.channels, input.size)?;
        x.values_mut().iter_mut().for_each(|v| *v = (*v - input.offset) * input.gain);
        Ok(x)
    }

    /// `x` is `[B, C, S, S]`.
    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Forward<'g>> {
        let mut embeddings = Vec::with_capacity(self.encoders.len());
        let mut pairs = Vec::with_capacity(self.encoders.len());
        let mut expression = None;
        for enc in &self.encoders {
            let grid = enc.segments(g, &self.store, x)?;
            if let Some(head) = &enc.expression {
                expression = Some(head.forward(g, &self.store, grid)?);
            }
            let emb = enc.attention.forward(g, &self.store, grid)?.pooled;
            pairs.push(self.heads.project(g, &self.store, enc.id, emb)?);
            embeddings.push(emb);
        }
        let fused = fuse(&pairs, &self.branches())?;
        let probs = self.classifier.forward(g, &self.store, fused)?;
        Ok(Forward {
            embeddings,
            pairs,
            fused,
            probs,
            expression,
        })
    }

    /// Classification, orthogonality and (with CE active) auxiliary losses.
    pub fn objective<'g>(&self, fwd: &Forward<'g>, labels: &[f64], expression_targets: &[f64]) -> Result<Objective<'g>> {
        let cfg = &self.config;
        let g = fwd.probs.graph();
        let (lb, lc) = (cfg.lambda_branch(), cfg.lambda_cross());
        // disabled terms are not evaluated and read as zero
        let branch = if lb > 0.0 { branch_ortho_loss(&fwd.pairs, cfg.ofdm.center)? } else { g.constant(Vec::new(), vec![0.0])? };
        let cross = if lc > 0.0 {
            cross_ortho_loss(&fwd.pairs, cfg.ofdm.center, cfg.ofdm.cross_mode)?
        } else {
            g.constant(Vec::new(), vec![0.0])?
        };
        let (mut loss, breakdown) = total_loss(fwd.probs, labels, branch, cross, lb, lc)?;
        let mut l_aux = 0.0;
        if let Some(pred) = fwd.expression {
            let b = expression_targets.len();
            let target = g.constant(vec![b], expression_targets.to_vec())?;
            let mse = pred.sub(target)?.sq_frobenius().scale(1.0 / b as f64);
            l_aux = mse.item();
            loss = loss.add(mse.scale(cfg.ce.aux_weight))?;
        }
        Ok(Objective { loss, breakdown, l_aux })
    }

    /// Frame-level fake probabilities, evaluated in chunks without recording gradients.
    pub fn predict(&self, frames: &[&Frame]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(self.config.train.batch_size.max(1)) {
            let g = Graph::new();
            let x = g.input(&self.batch_input(chunk)?);
            out.extend(self.forward(&g, x)?.probs.value());
        }
        Ok(out)
    }

    /// Parameter counts per module, in a fixed order.
    pub fn param_report(&self) -> Vec<(String, usize)> {
        let mut rows = Vec::new();
        for e in &self.encoders {
            let b = e.id.as_str();
            rows.push((format!("{b}.backbone"), e.backbone_params()));
            rows.push((format!("{b}.segment_attention"), e.attention.param_count()));
            if let Some(h) = &e.expression {
                rows.push((format!("{b}.expression_head"), h.param_count()));
            }
        }
        rows.push(("projection_heads".into(), self.heads.param_count()));
        rows.push(("classifier".into(), self.classifier.param_count()));
        rows
    }

    pub fn param_count(&self) -> usize {
        self.store.total_count()
    }

    /// Parameters plus the config digest record.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let digest = digest_array(&self.config.digest());
        let mut records: Vec<(&str, &DiffArray)> = vec![(DIGEST_RECORD, &digest)];
        records.extend(self.store.iter());
        checkpoint::encode(records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // write-then-rename so an interrupted save never clobbers the previous file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.checkpoint_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Rebuilds the model for `config` and restores parameters from `path`.
    /// The checkpoint must carry the digest of `config`.
    pub fn load(config: &RunConfig, path: &Path) -> Result<Self> {
        let records = checkpoint::load(path)?;
        let found = records
            .iter()
            .find(|(n, _)| n == DIGEST_RECORD)
            .map(|(_, a)| digest_from_array(a))
            .transpose()?
            .ok_or_else(|| Error::Mismatch("checkpoint has no config digest".into()))?;
        let expected = config.digest();
        if found != expected {
            return Err(Error::Mismatch(format!("checkpoint digest {found} does not match config digest {expected}")));
        }
        let mut model = Self::new(config)?;
        let params: Vec<_> = records.into_iter().filter(|(n, _)| n != DIGEST_RECORD).collect();
        checkpoint::restore(&mut model.store, &params)?;
        Ok(model)
    }
}

/// Encodes a 16-hex-digit digest as four exact 16-bit values.
fn digest_array(digest: &str) -> DiffArray {
    let v = u64::from_str_radix(digest, 16).unwrap_or(0);
    let values = (0..4).map(|i| ((v >> (48 - 16 * i)) & 0xffff) as f64).collect();
    DiffArray::new([4], values).expect("shape")
}

fn digest_from_array(a: &DiffArray) -> Result<String> {
    let v = a.values();
    if v.len() != 4 || v.iter().any(|x| x.fract() != 0.0 || !(0.0..65536.0).contains(x)) {
        return Err(Error::Format("malformed digest record".into()));
    }
    let n = v.iter().fold(0u64, |acc, &x| (acc << 16) | x as u64);
    Ok(format!("{n:016x}"))
}
