//! Fusion, the affine-sigmoid classifier, the training objective and
//! video-level aggregation.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{BranchId, TieRule};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::ofdm::{BatchPair, DisentangledPair};
use crate::tensor::{sigmoid, Graph, ParamStore, Var, BCE_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn from_target(y: f64) -> Result<Self> {
        match y {
            t if t == 0.0 => Ok(Label::Real),
            t if t == 1.0 => Ok(Label::Fake),
            t => Err(Error::Label(format!("target {t} is not 0 or 1"))),
        }
    }

    pub fn target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Label::Real),
            "fake" => Ok(Label::Fake),
            _ => Err(Error::Label(format!("unknown label {s:?}"))),
        }
    }
}

/// Concatenates `[sh; dis]` per branch in `order`. Every branch of `order`
/// must be present in `pairs`.
pub fn fuse<'g>(pairs: &[BatchPair<'g>], order: &[BranchId]) -> Result<Var<'g>> {
    let mut parts = Vec::with_capacity(2 * order.len());
    for &b in order {
        let p = pairs
            .iter()
            .find(|p| p.branch == b)
            .ok_or_else(|| Error::Completeness(format!("branch {b} missing from fusion")))?;
        parts.push(p.shared);
        parts.push(p.disentangled);
    }
    Var::concat_last(&parts)
}

/// Single-frame fusion over plain vectors.
pub fn fuse_vectors(pairs: &[DisentangledPair], order: &[BranchId]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for &b in order {
        let p = pairs
            .iter()
            .find(|p| p.branch == b)
            .ok_or_else(|| Error::Completeness(format!("branch {b} missing from fusion")))?;
        out.extend_from_slice(&p.shared);
        out.extend_from_slice(&p.disentangled);
    }
    Ok(out)
}

/// `ŷ = σ(W·F + b)`.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub linear: Linear,
}

impl Classifier {
    pub fn new<R: Rng>(store: &mut ParamStore, fused_dim: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(store, "classifier", fused_dim, 1, true, rng),
        }
    }

    /// `[B, F]` → probabilities `[B]`.
    pub fn forward<'g>(&self, g: &'g Graph, store: &ParamStore, fused: Var<'g>) -> Result<Var<'g>> {
        let b = fused.shape()[0];
        Ok(self.linear.forward(g, store, fused)?.reshape(&[b])?.sigmoid())
    }

    pub fn weights<'s>(&self, store: &'s ParamStore) -> (&'s [f64], f64) {
        let w = store.get(self.linear.weight).values();
        let b = self.linear.bias.map_or(0.0, |id| store.get(id).values()[0]);
        (w, b)
    }

    pub fn param_count(&self) -> usize {
        self.linear.param_count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameVerdict {
    pub probability: f64,
    pub label: Label,
    pub frame_index: usize,
}

impl FrameVerdict {
    /// Fake iff `probability > threshold`.
    pub fn new(probability: f64, threshold: f64, frame_index: usize) -> Self {
        let label = if probability > threshold { Label::Fake } else { Label::Real };
        Self {
            probability,
            label,
            frame_index,
        }
    }
}

/// Evaluates the classifier on one fused vector.
pub fn classify_frame(weights: &[f64], bias: f64, fused: &[f64], threshold: f64, frame_index: usize) -> Result<FrameVerdict> {
    if weights.len() != fused.len() {
        return Err(Error::dim("classify_frame", &[weights.len()], &[fused.len()]));
    }
    let logit = weights.iter().zip(fused).map(|(w, f)| w * f).sum::<f64>() + bias;
    Ok(FrameVerdict::new(sigmoid(logit), threshold, frame_index))
}

/// Components of the training objective. `total` is always
/// `l_cls + λ_branch·l_branch_ortho + λ_cross·l_cross_ortho`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_branch_ortho: f64,
    pub l_cross_ortho: f64,
    pub lambda_branch: f64,
    pub lambda_cross: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_cls: f64, l_branch_ortho: f64, l_cross_ortho: f64, lambda_branch: f64, lambda_cross: f64) -> Result<Self> {
        if !(lambda_branch >= 0.0 && lambda_cross >= 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {lambda_branch}, {lambda_cross}")));
        }
        Ok(Self {
            l_cls,
            l_branch_ortho,
            l_cross_ortho,
            lambda_branch,
            lambda_cross,
            total: l_cls + lambda_branch * l_branch_ortho + lambda_cross * l_cross_ortho,
        })
    }

    pub fn is_finite(&self) -> bool {
        [self.l_cls, self.l_branch_ortho, self.l_cross_ortho, self.total].iter().all(|v| v.is_finite())
    }
}

/// Mean clamped BCE over plain probabilities.
pub fn bce(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::dim("bce", &[probs.len()], &[labels.len()]));
    }
    let mut s = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        Label::from_target(y)?;
        let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        s -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
    }
    Ok(s / probs.len() as f64)
}

/// Builds the differentiable objective and its breakdown.
pub fn total_loss<'g>(
    probs: Var<'g>,
    labels: &[f64],
    branch_ortho: Var<'g>,
    cross_ortho: Var<'g>,
    lambda_branch: f64,
    lambda_cross: f64,
) -> Result<(Var<'g>, LossBreakdown)> {
    let l_cls = probs.bce(labels)?;
    let breakdown = LossBreakdown::new(l_cls.item(), branch_ortho.item(), cross_ortho.item(), lambda_branch, lambda_cross)?;
    let total = l_cls.add(branch_ortho.scale(lambda_branch))?.add(cross_ortho.scale(lambda_cross))?;
    Ok((total, breakdown))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoVerdict {
    pub clip_id: String,
    pub fake_votes: usize,
    pub real_votes: usize,
    pub decision: Label,
    pub mean_confidence: f64,
}

impl VideoVerdict {
    pub fn vote_fraction(&self) -> f64 {
        self.fake_votes as f64 / (self.fake_votes + self.real_votes) as f64
    }
}

/// Majority vote over frame labels; even splits go to `tie`.
pub fn video_verdict(clip_id: &str, frames: &[FrameVerdict], tie: TieRule) -> Result<VideoVerdict> {
    if frames.is_empty() {
        return Err(Error::Input(format!("clip {clip_id} has no scored frames")));
    }
    let fake_votes = frames.iter().filter(|f| f.label == Label::Fake).count();
    let real_votes = frames.len() - fake_votes;
    let decision = match fake_votes.cmp(&real_votes) {
        std::cmp::Ordering::Greater => Label::Fake,
        std::cmp::Ordering::Less => Label::Real,
        std::cmp::Ordering::Equal => match tie {
            TieRule::Fake => Label::Fake,
            TieRule::Real => Label::Real,
        },
    };
    // sort so the mean does not depend on frame order
    let mut probs: Vec<f64> = frames.iter().map(|f| f.probability).collect();
    probs.sort_by(f64::total_cmp);
    Ok(VideoVerdict {
        clip_id: clip_id.to_string(),
        fake_votes,
        real_votes,
        decision,
        mean_confidence: probs.iter().sum::<f64>() / probs.len() as f64,
    })
}
