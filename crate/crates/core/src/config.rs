//! Pipeline configuration. Every field has a default and the whole tree
//! round-trips through TOML.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::MotionConfig;
use crate::optim::layout::{CAMERA_GROUP, GAMMA_GROUP, MASK_GROUP};
use crate::optim::{DensifyConfig, LrSchedule};
use crate::render::RenderSettings;
use crate::scene::Vec3;

/// A learning rate decaying log-linearly from `initial` to `final` over a
/// stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decay {
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_rate: f64,
}

impl Decay {
    pub const fn new(initial: f64, final_rate: f64) -> Self {
        Self {
            initial,
            final_rate,
        }
    }

    pub fn schedule(&self, steps: usize) -> Result<LrSchedule> {
        LrSchedule::new(self.initial, self.final_rate, steps.max(1))
    }
}

/// Adam learning rates per parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position_bg: Decay,
    /// Used for foreground and relay Gaussians.
    pub position_fg: Decay,
    /// Multiply position and motion-field rates by the camera extent.
    pub scale_by_extent: bool,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
    pub sh1: f64,
    pub mask: f64,
    pub gamma: f64,
    pub hexplane: Decay,
    pub mlp: Decay,
    pub camera_color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_bg: Decay::new(2e-4, 1e-5),
            position_fg: Decay::new(1e-3, 5e-5),
            scale_by_extent: true,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            sh1: 2.5e-3 / 20.0,
            mask: 0.3,
            gamma: 1e-3,
            hexplane: Decay::new(1.6e-3, 1.6e-4),
            mlp: Decay::new(1.6e-4, 1.6e-5),
            camera_color: 1e-3,
        }
    }
}

impl LearningRates {
    pub fn validate(&self) -> Result<()> {
        let decays = [self.position_bg, self.position_fg, self.hexplane, self.mlp];
        for d in decays {
            d.schedule(1)?;
        }
        let fixed = [
            self.log_scale,
            self.rotation,
            self.opacity,
            self.color,
            self.sh1,
            self.mask,
            self.gamma,
            self.camera_color,
        ];
        if fixed.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::config(
                "learning rates must be finite and non-negative",
            ));
        }
        Ok(())
    }

    /// Rate of store group `name` at `step` of a stage of `steps` steps.
    /// Returns `None` for names that are not parameter groups.
    pub fn rate(&self, name: &str, step: usize, steps: usize, extent: f64) -> Option<f64> {
        let spatial = if self.scale_by_extent { extent } else { 1.0 };
        let decay = |d: Decay| d.schedule(steps).map(|s| s.rate(step)).ok();
        match name {
            MASK_GROUP => return Some(self.mask),
            GAMMA_GROUP => return Some(self.gamma),
            CAMERA_GROUP => return Some(self.camera_color),
            crate::model::HEXPLANE_GROUP => return decay(self.hexplane).map(|r| r * spatial),
            crate::model::MLP_BG_GROUP | crate::model::MLP_FG_GROUP => {
                return decay(self.mlp).map(|r| r * spatial)
            }
            _ => {}
        }
        let (owner, field) = name.split_once('/')?;
        Some(match field {
            "position" if owner == "bg-gaussians" => decay(self.position_bg)? * spatial,
            "position" => decay(self.position_fg)? * spatial,
            "log_scale" => self.log_scale,
            "rotation" => self.rotation,
            "opacity" => self.opacity,
            "color" => self.color,
            "sh1" => self.sh1,
            _ => return None,
        })
    }
}

/// Stage-1 mask settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// A Gaussian is kept at frames after the first while `σ(m) > epsilon`.
    pub epsilon: f64,
    pub mask_logit_init: f64,
    pub steps: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            mask_logit_init: 2.0,
            steps: 3000,
        }
    }
}

/// Photometric loss of the first two stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageLossConfig {
    /// Weight of the D-SSIM term.
    pub lambda: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
}

impl Default for StageLossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            ssim_window: 11,
            ssim_sigma: 1.5,
        }
    }
}

/// Stage-2 settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelayConfig {
    pub steps: usize,
    /// Frames per temporal segment (k).
    pub segment_length: usize,
    /// Frames blended into each pseudo-view (p).
    pub frames_per_segment: usize,
    /// Blend weights; empty means uniform.
    pub blend_weights: Vec<f64>,
    /// Gaussian blur (pixels) applied to renders and pseudo-views at the
    /// start of the stage; zero disables the coarse phase.
    pub coarse_sigma: f64,
    /// Fraction of the stage over which the blur shrinks to zero.
    pub coarse_fraction: f64,
    /// Number of distinct blur widths used while shrinking.
    pub coarse_levels: usize,
    /// Keep every relay field except position fixed while blurred, so
    /// copies travel instead of fading out.
    pub freeze_appearance_while_coarse: bool,
    /// Position rate while blurred, scaled by the scene extent like the
    /// other position rates and shrinking with the blur. The copies of one
    /// segment share a single translation during this phase.
    pub coarse_position_rate: f64,
    /// Replicate the foreground into per-segment copies. When off, stage 2
    /// is skipped and stage 3 deforms one global foreground set.
    pub replicate: bool,
}

impl Default for RelayConfig {
    fn default() -> Self {
        Self {
            steps: 14000,
            segment_length: 16,
            frames_per_segment: 3,
            blend_weights: Vec::new(),
            coarse_sigma: 0.0,
            coarse_fraction: 0.5,
            coarse_levels: 8,
            freeze_appearance_while_coarse: true,
            coarse_position_rate: 3e-3,
            replicate: true,
        }
    }
}

impl RelayConfig {
    pub fn weights(&self) -> Vec<f64> {
        if self.blend_weights.is_empty() {
            vec![1.0 / self.frames_per_segment as f64; self.frames_per_segment]
        } else {
            self.blend_weights.clone()
        }
    }
}

/// Stage-3 settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformStageConfig {
    pub steps: usize,
    pub field: MotionConfig,
}

impl Default for DeformStageConfig {
    fn default() -> Self {
        Self {
            steps: 20000,
            field: MotionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub background: [f64; 3],
    pub sh_degree: u8,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            sh_degree: 1,
        }
    }
}

impl RenderConfig {
    pub fn settings(&self) -> RenderSettings {
        RenderSettings {
            background: Vec3::from(self.background),
            sh_degree: self.sh_degree,
            ..RenderSettings::default()
        }
    }
}

/// How the starting cloud is built from seed points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub opacity: f64,
    /// Standard deviation of the position noise added to seed points.
    pub jitter: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            opacity: 0.1,
            jitter: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Run every batch sequentially on one thread.
    pub deterministic: bool,
    pub batch_size: usize,
    /// Cameras excluded from training and used for evaluation.
    pub test_cameras: Vec<usize>,
    pub init: InitConfig,
    pub render: RenderConfig,
    pub loss: StageLossConfig,
    pub mask: MaskConfig,
    pub relay: RelayConfig,
    pub deform: DeformStageConfig,
    pub lr: LearningRates,
    pub densify: DensifyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: false,
            batch_size: 4,
            test_cameras: Vec::new(),
            init: InitConfig::default(),
            render: RenderConfig::default(),
            loss: StageLossConfig::default(),
            mask: MaskConfig::default(),
            relay: RelayConfig::default(),
            deform: DeformStageConfig::default(),
            lr: LearningRates::default(),
            densify: DensifyConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Settings for the synthetic desk scene: 300 / 1400 / 2000 steps.
    /// A desk Gaussian covers a far larger share of the image than one of a
    /// full-size capture, so screen-space gradients are larger and the
    /// densification thresholds are raised 40-fold (keeping the
    /// foreground/background ratio). Relay copies start with a coarse
    /// blurred phase so they can reach distant segments.
    pub fn desk() -> Self {
        let mut cfg = Self {
            test_cameras: vec![1, 5],
            ..Self::default()
        };
        cfg.mask.steps = 300;
        cfg.relay.steps = 1400;
        cfg.deform.steps = 2000;
        cfg.relay.coarse_sigma = 16.0;
        cfg.densify.grad_threshold_bg *= 40.0;
        cfg.densify.grad_threshold_fg *= 40.0;
        cfg.densify.max_gaussians = 4000;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.mask.epsilon > 0.0 && self.mask.epsilon < 1.0) {
            return Err(Error::config("mask epsilon must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.loss.lambda) {
            return Err(Error::config("loss lambda must lie in [0, 1]"));
        }
        if self.loss.ssim_window == 0 || self.loss.ssim_sigma <= 0.0 {
            return Err(Error::config("ssim window and sigma must be positive"));
        }
        if self.relay.segment_length == 0 || self.relay.frames_per_segment == 0 {
            return Err(Error::config(
                "segment length and frames per segment must be positive",
            ));
        }
        let w = self.relay.weights();
        if w.len() != self.relay.frames_per_segment {
            return Err(Error::config(
                "one blend weight per selected frame is required",
            ));
        }
        if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 || w.iter().any(|v| *v < 0.0) {
            return Err(Error::config(
                "blend weights must be non-negative and sum to 1",
            ));
        }
        if !(self.relay.coarse_sigma >= 0.0)
            || !(self.relay.coarse_position_rate > 0.0)
            || !(0.0..=1.0).contains(&self.relay.coarse_fraction)
        {
            return Err(Error::config("invalid coarse phase settings"));
        }
        if !(self.init.opacity > 0.0 && self.init.opacity < 1.0) {
            return Err(Error::config("initial opacity must lie in (0, 1)"));
        }
        self.deform.field.hexplane.validate()?;
        self.lr.validate()?;
        self.densify.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
