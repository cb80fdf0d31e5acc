//! Losses and the staged training schedule: head warm-up, joint segmentation,
//! teacher alignment of the temporal module, then the joint objective.

pub mod losses;
pub mod teacher;
pub mod train;

pub use losses::{align_loss, bce_loss, ce_loss, dice_loss, total_loss, LossWeights};
pub use teacher::{FrozenTeacher, RandomStreamTeacher};
pub use train::{evaluate, run_stage, train_all, LogLine, StageSummary, TrainState};

use crate::error::{Error, Result};
use crate::model::atf::STREAM_PREFIXES;
use crate::model::{Fusion, GasMode, ModelConfig, ATF_PREFIX, CLS_PREFIX, ENCODER_PREFIX, HEAD_PREFIX};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StageId {
    S1a,
    S1b,
    S2Warmup,
    S2,
    S3Atf,
    S3E2e,
}

impl StageId {
    pub const ALL: [StageId; 6] = [
        StageId::S1a,
        StageId::S1b,
        StageId::S2Warmup,
        StageId::S2,
        StageId::S3Atf,
        StageId::S3E2e,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageId::S1a => "s1a",
            StageId::S1b => "s1b",
            StageId::S2Warmup => "s2-warmup",
            StageId::S2 => "s2",
            StageId::S3Atf => "s3-atf",
            StageId::S3E2e => "s3-e2e",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }

    /// Whether the parameter `name` is updated during this stage.
    pub fn trainable(self, name: &str) -> bool {
        let any = |prefixes: &[&str]| prefixes.iter().any(|p| name.starts_with(p));
        match self {
            StageId::S1a => any(&[HEAD_PREFIX]),
            StageId::S1b => any(&[ENCODER_PREFIX, HEAD_PREFIX]),
            StageId::S2Warmup => any(&STREAM_PREFIXES),
            StageId::S2 => any(&[ATF_PREFIX]),
            StageId::S3Atf => any(&[HEAD_PREFIX, ATF_PREFIX, CLS_PREFIX]),
            StageId::S3E2e => true,
        }
    }

    /// Stages whose encoder is frozen, so its features can be computed once.
    pub fn encoder_frozen(self) -> bool {
        !matches!(self, StageId::S1b | StageId::S3E2e)
    }
}

/// Ablation switches. All off is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Toggles {
    /// Swap the gas-aware encoder for a different backbone; not provided.
    pub no_tgaa: bool,
    /// Attention ignores the gas map.
    pub no_psi: bool,
    /// Classify from the last frame's deepest features; skips alignment.
    pub no_atf: bool,
    pub no_s2: bool,
    pub no_e2e: bool,
    pub equal_lambda: bool,
    pub concat_fusion: bool,
}

impl Toggles {
    /// Applies the architecture switches to `model`.
    pub fn apply(&self, model: &mut ModelConfig) -> Result<()> {
        if self.no_tgaa {
            return Err(Error::Config(
                "replacing the gas-aware encoder with another backbone is not supported".into(),
            ));
        }
        if self.no_atf && self.concat_fusion {
            return Err(Error::Config("no_atf and concat_fusion are mutually exclusive".into()));
        }
        model.gas_mode = if self.no_psi { GasMode::Bypass } else { GasMode::Gated };
        model.fusion = if self.no_atf {
            Fusion::LastFrame
        } else if self.concat_fusion {
            Fusion::Concat
        } else {
            Fusion::Attention
        };
        Ok(())
    }
}

/// Previous-frame mask fed to the decode head while training. Inference
/// always feeds the model's own prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskPrior {
    /// Ground-truth mask of the previous frame.
    #[default]
    Teacher,
    /// The model's own binarized prediction, rolled out over each clip at the
    /// start of every epoch.
    Predicted,
}

impl std::fmt::Display for MaskPrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskPrior::Teacher => "teacher",
            MaskPrior::Predicted => "predicted",
        })
    }
}

impl std::str::FromStr for MaskPrior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(MaskPrior::Teacher),
            "predicted" => Ok(MaskPrior::Predicted),
            _ => Err(Error::Config(format!("unknown mask prior {s:?}"))),
        }
    }
}

/// Epochs per stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageEpochs {
    pub s1a: usize,
    pub s1b: usize,
    pub s2_warmup: usize,
    pub s2: usize,
    pub s3_atf: usize,
    pub s3_e2e: usize,
}

impl Default for StageEpochs {
    fn default() -> Self {
        Self {
            s1a: 8,
            s1b: 12,
            s2_warmup: 6,
            s2: 10,
            s3_atf: 15,
            s3_e2e: 8,
        }
    }
}

impl StageEpochs {
    pub fn get(&self, stage: StageId) -> usize {
        match stage {
            StageId::S1a => self.s1a,
            StageId::S1b => self.s1b,
            StageId::S2Warmup => self.s2_warmup,
            StageId::S2 => self.s2,
            StageId::S3Atf => self.s3_atf,
            StageId::S3E2e => self.s3_e2e,
        }
    }
}

/// Peak learning rate per stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageLr {
    pub s1a: f64,
    pub s1b: f64,
    pub s2: f64,
    pub s3: f64,
}

impl Default for StageLr {
    fn default() -> Self {
        Self {
            s1a: 1e-4,
            s1b: 6e-5,
            s2: 1e-4,
            s3: 6e-5,
        }
    }
}

impl StageLr {
    pub fn get(&self, stage: StageId) -> f64 {
        match stage {
            StageId::S1a => self.s1a,
            StageId::S1b => self.s1b,
            StageId::S2Warmup | StageId::S2 => self.s2,
            StageId::S3Atf | StageId::S3E2e => self.s3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: StageEpochs,
    pub lr: StageLr,
    pub weight_decay: f64,
    /// Frames per step in the segmentation stages.
    pub frame_batch: usize,
    /// Clips per micro-batch in the clip-level stages.
    pub clip_batch: usize,
    /// Micro-batches accumulated per optimiser step.
    pub accum: usize,
    pub weights: LossWeights,
    pub mask_prior: MaskPrior,
    pub toggles: Toggles,
    pub seed: u64,
    pub teacher_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: StageEpochs::default(),
            lr: StageLr::default(),
            weight_decay: 0.01,
            frame_batch: 32,
            clip_batch: 8,
            accum: 4,
            weights: LossWeights::default(),
            mask_prior: MaskPrior::Teacher,
            toggles: Toggles::default(),
            seed: 42,
            teacher_seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.frame_batch == 0 || self.clip_batch == 0 || self.accum == 0 {
            return Err(Error::Config("batch sizes and accumulation must be positive".into()));
        }
        for s in StageId::ALL {
            let lr = self.lr.get(s);
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate for {} must be positive", s.name())));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Loss weights after the equal-weight switch.
    pub fn loss_weights(&self) -> LossWeights {
        if self.toggles.equal_lambda {
            LossWeights::EQUAL
        } else {
            self.weights
        }
    }

    /// Stages to run, in order, after the schedule switches.
    pub fn plan(&self) -> Vec<StageId> {
        let t = &self.toggles;
        StageId::ALL
            .into_iter()
            .filter(|s| match s {
                StageId::S2Warmup | StageId::S2 => !(t.no_s2 || t.no_atf),
                StageId::S3E2e => !t.no_e2e,
                _ => true,
            })
            .collect()
    }
}
