//! Stage 1: fit one static cloud to every frame while a learnable binary mask
//! decides which Gaussians may appear after the first frame, then split the
//! cloud into background and foreground.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LearningRates, PipelineConfig};
use crate::error::{Error, Result};
use crate::metrics::Ssim;
use crate::model::Model;
use crate::render::{MaskMode, RenderSettings};
use crate::scene::{sigmoid, sigmoid_grad, FrameSet, GaussianCloud, Group};
use crate::train::{
    render_sample, run_stage, ImageLoss, LoopOptions, Sample, SampleResult, StagePlan, StageRun,
};

/// Hard mask value: 1 when `σ(m) > ε`, else 0.
pub fn binary_mask(mask_logit: f64, epsilon: f64) -> f64 {
    if sigmoid(mask_logit) > epsilon {
        1.0
    } else {
        0.0
    }
}

/// Straight-through derivative of [`binary_mask`]: `σ'(m)` whatever the
/// forward value.
pub fn binary_mask_grad(mask_logit: f64) -> f64 {
    sigmoid_grad(mask_logit)
}

/// Opacity after masking, `M·o`.
pub fn masked_opacity(opacity: f64, mask: f64) -> f64 {
    mask * opacity
}

struct MaskPlan<'a> {
    frames: &'a FrameSet,
    cameras: Vec<usize>,
    slots: Vec<usize>,
    settings: RenderSettings,
    epsilon: f64,
    loss: ImageLoss,
    lr: &'a LearningRates,
    steps: usize,
    extent: f64,
}

impl StagePlan for MaskPlan<'_> {
    fn name(&self) -> &'static str {
        "stage 1"
    }

    fn domain(&self) -> (&[usize], &[usize]) {
        (&self.cameras, &self.slots)
    }

    fn evaluate(&self, model: &Model, sample: Sample, _step: usize) -> Result<SampleResult> {
        // The first frame sees every Gaussian; later frames only those whose
        // mask is on.
        let mode = if sample.slot == 1 {
            MaskMode::Off
        } else {
            MaskMode::Apply {
                epsilon: self.epsilon,
            }
        };
        let gaussians = &model.cloud.gaussians;
        let indices: Vec<usize> = (0..gaussians.len()).collect();
        let (loss, grads, camera, screen) = render_sample(
            gaussians,
            &indices,
            &model.cameras[sample.camera],
            &self.settings.with_mask(mode),
            self.frames.image(sample.camera, sample.slot),
            &self.loss,
            None,
            None,
        )?;
        Ok(SampleResult {
            loss,
            screen: screen
                .into_iter()
                .map(|(i, n)| (i, n, grads[i].position))
                .collect(),
            gaussians: grads.into_iter().enumerate().collect(),
            camera: Some((sample.camera, camera)),
            motion: None,
        })
    }

    fn rate(&self, name: &str, step: usize) -> Option<f64> {
        self.lr.rate(name, step, self.steps, self.extent)
    }

    fn densify_eligible(&self, _group: Group) -> bool {
        true
    }
}

/// Train `model` (all Gaussians in the background group) for
/// `cfg.mask.steps` steps on all frames of `frames`.
pub fn stage1_train(
    model: &mut Model,
    frames: &FrameSet,
    cameras: &[usize],
    cfg: &PipelineConfig,
    extent: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StageRun> {
    if frames.is_empty() {
        return Err(Error::config("stage 1 needs at least one frame"));
    }
    let mut plan = MaskPlan {
        frames,
        cameras: cameras.to_vec(),
        slots: (1..=frames.frame_count).collect(),
        settings: cfg.render.settings(),
        epsilon: cfg.mask.epsilon,
        loss: ImageLoss::Photometric {
            lambda: cfg.loss.lambda,
            ssim: Ssim::new(cfg.loss.ssim_window, cfg.loss.ssim_sigma),
        },
        lr: &cfg.lr,
        steps: cfg.mask.steps,
        extent,
    };
    let opts = LoopOptions {
        steps: cfg.mask.steps,
        batch_size: cfg.batch_size,
        densify: Some(cfg.densify.clone()),
        extent,
        deterministic: cfg.deterministic,
    };
    run_stage(model, &mut plan, &opts, rng)
}

/// Outcome of [`decouple`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoupleReport {
    pub epsilon: f64,
    pub background: usize,
    pub foreground: usize,
    /// Counts of `σ(m)` in ten equal bins over `[0, 1]`.
    pub mask_histogram: Vec<usize>,
}

impl DecoupleReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Move every Gaussian whose mask is off to the foreground group (which
/// gives it a zero gamma); the rest stay in the background.
pub fn decouple(cloud: &mut GaussianCloud, epsilon: f64) -> DecoupleReport {
    let mut hist = vec![0; 10];
    let mut foreground = 0;
    for g in &mut cloud.gaussians {
        let s = sigmoid(g.mask_logit);
        hist[((s * 10.0) as usize).min(9)] += 1;
        if binary_mask(g.mask_logit, epsilon) == 0.0 {
            g.set_group(Group::Foreground);
            foreground += 1;
        } else {
            g.set_group(Group::Background);
        }
    }
    if foreground == 0 {
        log::warn!("decoupling found no foreground Gaussians; the relay stage will do nothing");
    }
    DecoupleReport {
        epsilon,
        background: cloud.len() - foreground,
        foreground,
        mask_histogram: hist,
    }
}
