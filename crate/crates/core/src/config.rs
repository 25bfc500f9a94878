//! Run configuration: every hyperparameter of every stage, with defaults.
//!
//! The on-disk form is sectioned `key = value` text (TOML). The digest is a
//! SHA-256 of the canonical re-serialisation, so formatting and comment
//! differences in a hand-written file do not change it.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BranchId {
    #[serde(rename = "LS")]
    Ls,
    #[serde(rename = "MG")]
    Mg,
    #[serde(rename = "CE")]
    Ce,
}

impl BranchId {
    pub const ALL: [BranchId; 3] = [BranchId::Ls, BranchId::Mg, BranchId::Ce];

    pub fn as_str(self) -> &'static str {
        match self {
            BranchId::Ls => "LS",
            BranchId::Mg => "MG",
            BranchId::Ce => "CE",
        }
    }
}

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Domain::A),
            "B" | "b" => Ok(Domain::B),
            _ => Err(Error::Config(format!("unknown domain {s:?}"))),
        }
    }
}

/// Ablation variants: which branches run and which orthogonality terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "FULL")]
    Full,
    #[serde(rename = "BO-wo-MG-CE")]
    BoWoMgCe,
    #[serde(rename = "BO-wo-LS-CE")]
    BoWoLsCe,
    #[serde(rename = "BO-wo-LS-MG")]
    BoWoLsMg,
    #[serde(rename = "CBO-wo-LS")]
    CboWoLs,
    #[serde(rename = "CBO-wo-MG")]
    CboWoMg,
    #[serde(rename = "CBO-wo-CE")]
    CboWoCe,
    #[serde(rename = "MB-wo-BO-CBO")]
    MbWoBoCbo,
    #[serde(rename = "MB-wo-CBO")]
    MbWoCbo,
    #[serde(rename = "MB-wo-BO")]
    MbWoBo,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::BoWoMgCe,
        Variant::BoWoLsCe,
        Variant::BoWoLsMg,
        Variant::CboWoLs,
        Variant::CboWoMg,
        Variant::CboWoCe,
        Variant::MbWoBoCbo,
        Variant::MbWoCbo,
        Variant::MbWoBo,
        Variant::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "FULL",
            Variant::BoWoMgCe => "BO-wo-MG-CE",
            Variant::BoWoLsCe => "BO-wo-LS-CE",
            Variant::BoWoLsMg => "BO-wo-LS-MG",
            Variant::CboWoLs => "CBO-wo-LS",
            Variant::CboWoMg => "CBO-wo-MG",
            Variant::CboWoCe => "CBO-wo-CE",
            Variant::MbWoBoCbo => "MB-wo-BO-CBO",
            Variant::MbWoCbo => "MB-wo-CBO",
            Variant::MbWoBo => "MB-wo-BO",
        }
    }

    /// Active branches, in fusion order.
    pub fn branches(self) -> Vec<BranchId> {
        use BranchId::*;
        match self {
            Variant::BoWoMgCe => vec![Ls],
            Variant::BoWoLsCe => vec![Mg],
            Variant::BoWoLsMg => vec![Ce],
            Variant::CboWoLs => vec![Mg, Ce],
            Variant::CboWoMg => vec![Ls, Ce],
            Variant::CboWoCe => vec![Ls, Mg],
            Variant::Full | Variant::MbWoBoCbo | Variant::MbWoCbo | Variant::MbWoBo => vec![Ls, Mg, Ce],
        }
    }

    pub fn branch_ortho_enabled(self) -> bool {
        !matches!(self, Variant::MbWoBoCbo | Variant::MbWoBo)
    }

    /// Cross-branch term; vacuous with a single branch.
    pub fn cross_ortho_enabled(self) -> bool {
        self.branches().len() >= 2 && !matches!(self, Variant::MbWoBoCbo | Variant::MbWoCbo)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputConfig {
    pub channels: usize,
    /// Square side the encoders consume; larger frames are centre-cropped to it.
    pub size: usize,
    /// Pixels enter the encoders as `(p - offset) * gain`.
    pub offset: f64,
    pub gain: f64,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            size: 32,
            offset: 0.5,
            gain: 4.0,
        }
    }
}

/// Strided convolution stack used by the LS and CE branches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvBranchConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    /// Pooled grid `[k_h, k_w]`.
    pub grid: [usize; 2],
    /// Number of conv stages whose output is tapped (0 = all).
    pub tap: usize,
}

impl Default for ConvBranchConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 16],
            strides: vec![2, 2],
            kernel: 3,
            grid: [2, 2],
            tap: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CeConfig {
    /// Weight of the auxiliary expression-regression loss.
    pub aux_weight: f64,
    pub conv: ConvBranchConfig,
}

impl Default for CeConfig {
    fn default() -> Self {
        Self {
            aux_weight: 0.1,
            conv: ConvBranchConfig {
                kernel: 5,
                ..ConvBranchConfig::default()
            },
        }
    }
}

/// Shifted-window attention backbone of the MG branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MgConfig {
    /// Patch-embedding side (stride equals side).
    pub patch: usize,
    /// Token width at the first stage; doubled by each merge.
    pub embed: usize,
    /// Window side `M`.
    pub window: usize,
    pub shift: usize,
    pub heads: usize,
    /// Attention stages; a 2×2 merge sits between consecutive stages.
    pub depth: usize,
    pub grid: [usize; 2],
}

impl Default for MgConfig {
    fn default() -> Self {
        Self {
            patch: 4,
            embed: 16,
            window: 4,
            shift: 2,
            heads: 2,
            depth: 2,
            grid: [2, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    /// Embedding size `D` of every pooled branch vector.
    pub embed_dim: usize,
    pub heads: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { embed_dim: 64, heads: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadSharing {
    Shared,
    PerBranch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossMode {
    /// ‖S_iᵀ S_j‖²_F over the batch matrices.
    Batched,
    /// Σ_b (s_i,b · s_j,b)², one inner product per sample.
    PerSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfdmConfig {
    pub shared_dim: usize,
    pub disentangled_dim: usize,
    pub lambda_branch: f64,
    pub lambda_cross: f64,
    pub sharing: HeadSharing,
    /// Subtract the batch mean before forming Gram matrices.
    pub center: bool,
    pub cross_mode: CrossMode,
}

impl Default for OfdmConfig {
    fn default() -> Self {
        Self {
            shared_dim: 8,
            disentangled_dim: 16,
            lambda_branch: 0.4,
            lambda_cross: 0.25,
            sharing: HeadSharing::Shared,
            center: false,
            cross_mode: CrossMode::Batched,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieRule {
    Fake,
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VideoScore {
    MeanConfidence,
    VoteFraction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub threshold: f64,
    pub tie: TieRule,
    pub video_score: VideoScore,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            tie: TieRule::Fake,
            video_score: VideoScore::MeanConfidence,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Frames per optimisation step.
    pub batch_size: usize,
    /// Use every `frame_stride`-th frame of each clip.
    pub frame_stride: usize,
    /// Fraction of training-domain clips held out for within-domain testing.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 32,
            frame_stride: 1,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub train_domain: Domain,
    pub input: InputConfig,
    pub ls: ConvBranchConfig,
    pub mg: MgConfig,
    pub ce: CeConfig,
    pub attention: AttentionConfig,
    pub ofdm: OfdmConfig,
    pub detector: DetectorConfig,
    pub optim: AdamConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Desk-scale profile; the shipped default.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            variant: Variant::Full,
            train_domain: Domain::A,
            input: InputConfig::default(),
            ls: ConvBranchConfig::default(),
            mg: MgConfig::default(),
            ce: CeConfig::default(),
            attention: AttentionConfig::default(),
            ofdm: OfdmConfig::default(),
            detector: DetectorConfig::default(),
            optim: AdamConfig::default(),
            train: TrainConfig::default(),
        }
    }

    /// Published-scale dimensions (D = 2048, d_s = 128, d_d = 512, 100 epochs).
    /// Not verified at this scale.
    pub fn paper_scale() -> Self {
        let mut c = Self::desk();
        c.attention.embed_dim = 2048;
        c.ofdm.shared_dim = 128;
        c.ofdm.disentangled_dim = 512;
        c.train.epochs = 100;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Canonical text form: every field, fixed order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_toml().as_bytes());
        hash[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn fused_dim(&self) -> usize {
        self.variant.branches().len() * (self.ofdm.shared_dim + self.ofdm.disentangled_dim)
    }

    pub fn lambda_branch(&self) -> f64 {
        if self.variant.branch_ortho_enabled() {
            self.ofdm.lambda_branch
        } else {
            0.0
        }
    }

    pub fn lambda_cross(&self) -> f64 {
        if self.variant.cross_ortho_enabled() {
            self.ofdm.lambda_cross
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.input.size < 8 || self.input.channels == 0 {
            return err(format!("input must be at least 8×8 with ≥1 channel, got {:?}", self.input));
        }
        for (name, b) in [("ls", &self.ls), ("ce", &self.ce.conv)] {
            if b.channels.is_empty() || b.channels.len() != b.strides.len() {
                return err(format!("{name}: channels and strides must be non-empty and equal length"));
            }
            if b.kernel == 0 || b.strides.contains(&0) || b.channels.contains(&0) {
                return err(format!("{name}: kernel, strides and channels must be positive"));
            }
            if b.tap > b.channels.len() {
                return err(format!("{name}: tap {} exceeds {} stages", b.tap, b.channels.len()));
            }
            if b.grid.contains(&0) {
                return err(format!("{name}: grid extents must be positive"));
            }
        }
        let mg = &self.mg;
        if mg.patch == 0 || mg.embed == 0 || mg.window == 0 || mg.heads == 0 || mg.depth == 0 {
            return err("mg: patch, embed, window, heads and depth must be positive".into());
        }
        if mg.shift >= mg.window {
            return err(format!("mg: shift {} must be smaller than window {}", mg.shift, mg.window));
        }
        if mg.embed % mg.heads != 0 {
            return err(format!("mg: embed {} not divisible by heads {}", mg.embed, mg.heads));
        }
        let mut side = self.input.size / mg.patch;
        if side == 0 || self.input.size % mg.patch != 0 {
            return err(format!("mg: patch {} must divide input size {}", mg.patch, self.input.size));
        }
        for stage in 0..mg.depth {
            if side % mg.window != 0 {
                return err(format!("mg: window {} does not divide stage-{stage} extent {side}", mg.window));
            }
            if stage + 1 < mg.depth {
                if side % 2 != 0 {
                    return err(format!("mg: stage-{stage} extent {side} cannot be merged 2×2"));
                }
                side /= 2;
            }
        }
        if mg.grid[0] == 0 || mg.grid[1] == 0 || mg.grid[0] > side || mg.grid[1] > side {
            return err(format!("mg: grid {:?} exceeds final extent {side}", mg.grid));
        }
        let a = &self.attention;
        if a.embed_dim == 0 || a.heads == 0 || a.embed_dim % a.heads != 0 {
            return err(format!("attention: D = {} not divisible by heads {}", a.embed_dim, a.heads));
        }
        let o = &self.ofdm;
        if o.shared_dim == 0 || o.disentangled_dim == 0 {
            return err("ofdm: projection dims must be ≥ 1".into());
        }
        if !(o.lambda_branch >= 0.0 && o.lambda_cross >= 0.0) {
            return err("ofdm: λ values must be non-negative".into());
        }
        if !(self.detector.threshold > 0.0 && self.detector.threshold < 1.0) {
            return err("detector: threshold must lie in (0,1)".into());
        }
        if self.ce.aux_weight < 0.0 {
            return err("ce: aux_weight must be non-negative".into());
        }
        let t = &self.train;
        if t.batch_size == 0 || t.frame_stride == 0 {
            return err("train: batch_size and frame_stride must be positive".into());
        }
        if !(0.0..1.0).contains(&t.holdout_fraction) {
            return err("train: holdout_fraction must lie in [0,1)".into());
        }
        self.optim.validate()
    }
}
