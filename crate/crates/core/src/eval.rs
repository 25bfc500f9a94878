//! AUC, the within/cross-domain protocols and the ablation runner.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Variant, VideoScore};
use crate::data::SyntheticClip;
use crate::detector::{video_verdict, FrameVerdict, Label, VideoVerdict};
use crate::error::{Error, Result};
use crate::model::CbodModel;
use crate::train::{train, TrainOutcome};

/// Probability that a random positive outscores a random negative, ties
/// counting one half. `labels` must be 0 or 1 and contain both classes.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut pos, mut neg) = (0u64, 0u64);
    let (mut concordant, mut tied) = (0u64, 0u64);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0u64, 0u64);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            match labels[idx[j]] {
                y if y == 1.0 => gp += 1,
                y if y == 0.0 => gn += 1,
                y => return Err(Error::Label(format!("label {y} is not 0 or 1"))),
            }
            j += 1;
        }
        // positives here beat every negative in earlier (lower) groups
        concordant += gp * neg;
        tied += gp * gn;
        pos += gp;
        neg += gn;
        i = j;
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUC needs both classes".into()));
    }
    Ok((concordant as f64 + 0.5 * tied as f64) / (pos * neg) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Within,
    Cross,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Within => "within",
            Protocol::Cross => "cross",
        })
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "within" => Ok(Protocol::Within),
            "cross" => Ok(Protocol::Cross),
            _ => Err(Error::Config(format!("unknown protocol {s:?}"))),
        }
    }
}

/// Train and test clips for one protocol.
pub struct Split<'a> {
    pub train: Vec<&'a SyntheticClip>,
    pub test: Vec<&'a SyntheticClip>,
}

/// Training always uses the same clips: the training-domain clips minus a
/// seed-stable, label-stratified hold-out. The within protocol tests on that
/// hold-out; the cross protocol tests on every clip of the other domain.
pub fn split<'a>(cfg: &RunConfig, protocol: Protocol, clips: &'a [SyntheticClip]) -> Result<Split<'a>> {
    let home: Vec<&SyntheticClip> = clips.iter().filter(|c| c.domain == cfg.train_domain).collect();
    let away: Vec<&SyntheticClip> = clips.iter().filter(|c| c.domain != cfg.train_domain).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let (mut train_set, mut holdout) = (Vec::new(), Vec::new());
    for label in [Label::Real, Label::Fake] {
        let mut group: Vec<&SyntheticClip> = home.iter().copied().filter(|c| c.label == label).collect();
        group.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        group.shuffle(&mut rng);
        let n_hold = (group.len() as f64 * cfg.train.holdout_fraction).round() as usize;
        holdout.extend_from_slice(&group[..n_hold]);
        train_set.extend_from_slice(&group[n_hold..]);
    }
    train_set.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    holdout.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    let test = match protocol {
        Protocol::Within => holdout,
        Protocol::Cross => away,
    };
    let has_both = |s: &[&SyntheticClip]| s.iter().any(|c| c.label == Label::Real) && s.iter().any(|c| c.label == Label::Fake);
    if !has_both(&train_set) {
        return Err(Error::Config(format!("{protocol}: training split lacks one of the labels")));
    }
    if !has_both(&test) {
        return Err(Error::Config(format!(
            "{protocol}: test split lacks one of the labels (domain {} present: {})",
            cfg.train_domain.other(),
            clips.iter().any(|c| c.domain != cfg.train_domain)
        )));
    }
    check_disjoint(train_set.iter().map(|c| c.clip_id.as_str()), &test)?;
    Ok(Split { train: train_set, test })
}

/// Errors if any test clip id appears among `train_ids`.
pub fn check_disjoint<'a>(train_ids: impl IntoIterator<Item = &'a str>, test: &[&SyntheticClip]) -> Result<()> {
    let ids: BTreeSet<&str> = train_ids.into_iter().collect();
    let leaked: Vec<&str> = test.iter().map(|c| c.clip_id.as_str()).filter(|id| ids.contains(id)).collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(Error::Leakage(format!("{} test clips were used for training: {}", leaked.len(), leaked.join(", "))))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerVideo {
    pub clip_id: String,
    pub decision: Label,
    pub mean_confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub frame_auc: f64,
    pub video_auc: f64,
    pub variant: Variant,
    pub seed: u64,
    pub config_digest: String,
    pub per_video: Vec<PerVideo>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }
}

/// Scores every (strided) frame of every clip and aggregates per video.
pub fn score_clips(model: &CbodModel, clips: &[&SyntheticClip]) -> Result<(Vec<f64>, Vec<f64>, Vec<VideoVerdict>)> {
    let cfg = &model.config;
    let stride = cfg.train.frame_stride.max(1);
    let (mut frame_scores, mut frame_labels, mut videos) = (Vec::new(), Vec::new(), Vec::with_capacity(clips.len()));
    for clip in clips {
        let frames: Vec<_> = clip.frames.iter().step_by(stride).collect();
        let probs = model.predict(&frames)?;
        let verdicts: Vec<FrameVerdict> = probs
            .iter()
            .zip(&frames)
            .map(|(&p, f)| FrameVerdict::new(p, cfg.detector.threshold, f.index))
            .collect();
        videos.push(video_verdict(&clip.clip_id, &verdicts, cfg.detector.tie)?);
        frame_labels.extend(std::iter::repeat(clip.label.target()).take(probs.len()));
        frame_scores.extend(probs);
    }
    Ok((frame_scores, frame_labels, videos))
}

/// Scores `test` with a trained model.
pub fn evaluate(model: &CbodModel, protocol: Protocol, test: &[&SyntheticClip]) -> Result<EvalReport> {
    let cfg = &model.config;
    let (scores, labels, videos) = score_clips(model, test)?;
    let frame_auc = auc(&scores, &labels)?;
    let video_scores: Vec<f64> = videos
        .iter()
        .map(|v| match cfg.detector.video_score {
            VideoScore::MeanConfidence => v.mean_confidence,
            VideoScore::VoteFraction => v.vote_fraction(),
        })
        .collect();
    let video_labels: Vec<f64> = test.iter().map(|c| c.label.target()).collect();
    let video_auc = auc(&video_scores, &video_labels)?;
    Ok(EvalReport {
        protocol,
        frame_auc,
        video_auc,
        variant: cfg.variant,
        seed: cfg.seed,
        config_digest: cfg.digest(),
        per_video: videos
            .into_iter()
            .map(|v| PerVideo {
                clip_id: v.clip_id,
                decision: v.decision,
                mean_confidence: v.mean_confidence,
            })
            .collect(),
    })
}

/// Reports for both protocols from a single training run.
pub struct ProtocolRun {
    pub within: Option<EvalReport>,
    pub cross: Option<EvalReport>,
    pub training: TrainOutcome,
    pub model: CbodModel,
}

/// Trains a fresh model on the shared training split and evaluates the
/// requested protocols. The training access log is audited against every
/// test set.
pub fn run_protocols(cfg: &RunConfig, protocols: &[Protocol], clips: &[SyntheticClip]) -> Result<ProtocolRun> {
    let splits = protocols
        .iter()
        .map(|&p| split(cfg, p, clips).map(|s| (p, s)))
        .collect::<Result<Vec<_>>>()?;
    let train_clips = &splits.first().ok_or_else(|| Error::Config("no protocol requested".into()))?.1.train;
    let mut model = CbodModel::new(cfg)?;
    let training = train(&mut model, train_clips, |_, _| Ok(()))?;
    let (mut within, mut cross) = (None, None);
    for (p, s) in &splits {
        check_disjoint(training.accessed.iter().map(String::as_str), &s.test)?;
        let report = evaluate(&model, *p, &s.test)?;
        match p {
            Protocol::Within => within = Some(report),
            Protocol::Cross => cross = Some(report),
        }
    }
    Ok(ProtocolRun {
        within,
        cross,
        training,
        model,
    })
}

pub fn run_protocol(cfg: &RunConfig, protocol: Protocol, clips: &[SyntheticClip]) -> Result<EvalReport> {
    let run = run_protocols(cfg, &[protocol], clips)?;
    Ok(match protocol {
        Protocol::Within => run.within,
        Protocol::Cross => run.cross,
    }
    .expect("requested protocol"))
}

/// Same budget and seed as `cfg`, with the variant's branch mask and loss
/// zeroing applied.
pub fn run_ablation(variant: Variant, cfg: &RunConfig, protocol: Protocol, clips: &[SyntheticClip]) -> Result<EvalReport> {
    let mut c = cfg.clone();
    c.variant = variant;
    run_protocol(&c, protocol, clips)
}
