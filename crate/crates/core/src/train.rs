//! Mini-batch training loop.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::SyntheticClip;
use crate::error::{Error, Result};
use crate::model::CbodModel;
use crate::tensor::{Graph, OptimState};

/// Frame-weighted epoch means of the loss components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_branch_ortho: f64,
    pub l_cross_ortho: f64,
    pub total: f64,
    pub l_aux: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub trace: Vec<EpochLoss>,
    /// Every clip whose frames were read during training.
    pub accessed: BTreeSet<String>,
}

/// Header of the loss-trace CSV.
pub const TRACE_HEADER: &str = "epoch,l_cls,l_branch_ortho,l_cross_ortho,total";

pub fn trace_csv(digest: &str, trace: &[EpochLoss]) -> String {
    let mut s = format!("# config_digest = {digest}\n{TRACE_HEADER}\n");
    for e in trace {
        s.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            e.epoch, e.l_cls, e.l_branch_ortho, e.l_cross_ortho, e.total
        ));
    }
    s
}

/// `(clip index, frame index)` pairs visited each epoch.
fn samples(clips: &[&SyntheticClip], stride: usize) -> Vec<(usize, usize)> {
    clips
        .iter()
        .enumerate()
        .flat_map(|(c, clip)| (0..clip.frames.len()).step_by(stride.max(1)).map(move |t| (c, t)))
        .collect()
}

/// Trains `model` on `clips`. `on_epoch` runs after every completed epoch
/// (checkpointing hooks in here); a non-finite loss aborts with a numeric
/// error before the offending step is applied.
pub fn train<F>(model: &mut CbodModel, clips: &[&SyntheticClip], mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&CbodModel, &EpochLoss) -> Result<()>,
{
    let cfg = model.config.clone();
    if clips.is_empty() {
        return Err(Error::Data("no training clips".into()));
    }
    let mut optim = OptimState::new(cfg.optim.clone(), &model.store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order = samples(clips, cfg.train.frame_stride);
    let mut outcome = TrainOutcome::default();
    for epoch in 1..=cfg.train.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        for batch in order.chunks(cfg.train.batch_size.max(1)) {
            let frames: Vec<_> = batch.iter().map(|&(c, t)| &clips[c].frames[t]).collect();
            let labels: Vec<f64> = batch.iter().map(|&(c, _)| clips[c].label.target()).collect();
            let expr: Vec<f64> = batch.iter().map(|&(c, t)| clips[c].expression[t]).collect();
            for &(c, _) in batch {
                outcome.accessed.insert(clips[c].clip_id.clone());
            }

            let g = Graph::new();
            let x = g.input(&model.batch_input(&frames)?);
            let fwd = model.forward(&g, x)?;
            let obj = model.objective(&fwd, &labels, &expr)?;
            if !obj.breakdown.is_finite() || !obj.loss.item().is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}")));
            }
            let grads = g.backward(obj.loss)?;
            model.store.zero_grad();
            grads.accumulate_into(&mut model.store)?;
            optim.step(&mut model.store)?;

            let n = batch.len() as f64;
            let b = &obj.breakdown;
            for (s, v) in sums.iter_mut().zip([b.l_cls, b.l_branch_ortho, b.l_cross_ortho, b.total, obj.l_aux]) {
                *s += v * n;
            }
        }
        optim.end_epoch();
        let n = order.len() as f64;
        let e = EpochLoss {
            epoch,
            l_cls: sums[0] / n,
            l_branch_ortho: sums[1] / n,
            l_cross_ortho: sums[2] / n,
            total: sums[3] / n,
            l_aux: sums[4] / n,
        };
        outcome.trace.push(e);
        on_epoch(model, &e)?;
    }
    Ok(outcome)
}

/// Fits the CE branch to the per-frame expression targets alone, without
/// the classification or orthogonality terms. Returns the epoch-mean MSE.
pub fn train_expression(model: &mut CbodModel, clips: &[&SyntheticClip]) -> Result<Vec<f64>> {
    let cfg = model.config.clone();
    let ce = model
        .encoders
        .iter()
        .position(|e| e.expression.is_some())
        .ok_or_else(|| Error::Config(format!("variant {} has no CE branch", cfg.variant)))?;
    let mut optim = OptimState::new(cfg.optim.clone(), &model.store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order = samples(clips, cfg.train.frame_stride);
    let mut trace = Vec::with_capacity(cfg.train.epochs);
    for _ in 0..cfg.train.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.train.batch_size.max(1)) {
            let frames: Vec<_> = batch.iter().map(|&(c, t)| &clips[c].frames[t]).collect();
            let expr: Vec<f64> = batch.iter().map(|&(c, t)| clips[c].expression[t]).collect();
            let g = Graph::new();
            let x = g.input(&model.batch_input(&frames)?);
            let enc = &model.encoders[ce];
            let grid = enc.segments(&g, &model.store, x)?;
            let pred = enc.expression.as_ref().expect("CE head").forward(&g, &model.store, grid)?;
            let target = g.constant(vec![expr.len()], expr)?;
            let mse = pred.sub(target)?.sq_frobenius().scale(1.0 / batch.len() as f64);
            if !mse.item().is_finite() {
                return Err(Error::Numeric("non-finite expression loss".into()));
            }
            sum += mse.item() * batch.len() as f64;
            let grads = g.backward(mse)?;
            model.store.zero_grad();
            grads.accumulate_into(&mut model.store)?;
            // parameters off the expression path get an explicit zero gradient
            for id in model.store.ids().collect::<Vec<_>>() {
                let p = model.store.get_mut(id);
                if p.grad().is_none() {
                    let z = vec![0.0; p.len()];
                    p.accumulate_grad(&z)?;
                }
            }
            optim.step(&mut model.store)?;
        }
        optim.end_epoch();
        trace.push(sum / order.len() as f64);
    }
    Ok(trace)
}
