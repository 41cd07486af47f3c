//! Stage 3: deform the active Gaussians of each frame with the motion field
//! and optimize everything jointly against the raw frames.

use rand_chacha::ChaCha8Rng;

use crate::config::{LearningRates, PipelineConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::motion::{active_set_for_frame, MotionGrads};
use crate::optim::layout::MASK_GROUP;
use crate::render::{MaskMode, RenderSettings};
use crate::scene::{normalized_time, FrameSet, Group};
use crate::train::{
    render_sample, run_stage, ImageLoss, LoopOptions, Sample, SampleResult, StagePlan, StageRun,
};

struct DeformPlan<'a> {
    frames: &'a FrameSet,
    cameras: Vec<usize>,
    slots: Vec<usize>,
    settings: RenderSettings,
    lr: &'a LearningRates,
    steps: usize,
    extent: f64,
    tv_weight: f64,
    train_heads: bool,
}

impl StagePlan for DeformPlan<'_> {
    fn name(&self) -> &'static str {
        "stage 3"
    }

    fn domain(&self) -> (&[usize], &[usize]) {
        (&self.cameras, &self.slots)
    }

    fn evaluate(&self, model: &Model, sample: Sample, _step: usize) -> Result<SampleResult> {
        let motion = model
            .motion
            .as_ref()
            .ok_or_else(|| Error::Internal("stage 3 without a motion field".into()))?;
        let frame = sample.slot;
        let t = normalized_time(frame, self.frames.frame_count);
        let indices = active_set_for_frame(&model.cloud, frame, &model.segments);
        let (deformed, caches): (Vec<_>, Vec<_>) = indices
            .iter()
            .map(|&i| motion.deform(&model.cloud.gaussians[i], t))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let (loss, grads, camera, screen) = render_sample(
            &deformed,
            &indices,
            &model.cameras[sample.camera],
            &self.settings,
            self.frames.image(sample.camera, frame),
            &ImageLoss::L1,
            None,
            None,
        )?;
        let mut motion_grads = motion.zero_grads();
        let canonical: Vec<_> = indices
            .iter()
            .zip(&caches)
            .zip(&grads)
            .map(|((&i, cache), d)| {
                motion.deform_backward(&model.cloud.gaussians[i], cache, d, &mut motion_grads)
            })
            .collect();
        let mut local = vec![usize::MAX; model.cloud.len()];
        indices.iter().enumerate().for_each(|(k, &i)| local[i] = k);
        Ok(SampleResult {
            loss,
            screen: screen
                .into_iter()
                .map(|(i, n)| (i, n, canonical[local[i]].position))
                .collect(),
            gaussians: indices.into_iter().zip(canonical).collect(),
            camera: Some((sample.camera, camera)),
            motion: Some(motion_grads),
        })
    }

    fn rate(&self, name: &str, step: usize) -> Option<f64> {
        if name == MASK_GROUP {
            return None;
        }
        if !self.train_heads
            && matches!(
                name,
                crate::model::MLP_BG_GROUP | crate::model::MLP_FG_GROUP
            )
        {
            return None;
        }
        self.lr.rate(name, step, self.steps, self.extent)
    }

    fn densify_eligible(&self, _group: Group) -> bool {
        true
    }

    fn regularize(&self, model: &Model, grads: &mut MotionGrads) -> f64 {
        model
            .motion
            .as_ref()
            .map_or(0.0, |m| m.tv_loss(self.tv_weight, Some(grads)))
    }
}

/// Options of a stage-3 run beyond the pipeline configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformOptions {
    /// When false the deformation heads keep their initial (zero) output, so
    /// the stage reduces to static refinement.
    pub train_heads: bool,
}

impl Default for DeformOptions {
    fn default() -> Self {
        Self { train_heads: true }
    }
}

/// Jointly optimize Gaussians, gamma, motion field and camera color tunes.
/// `model.motion` must already exist.
pub fn stage3_train(
    model: &mut Model,
    frames: &FrameSet,
    cameras: &[usize],
    cfg: &PipelineConfig,
    extent: f64,
    options: DeformOptions,
    rng: &mut ChaCha8Rng,
) -> Result<StageRun> {
    if model.motion.is_none() {
        return Err(Error::config("stage 3 needs a motion field"));
    }
    let steps = cfg.deform.steps;
    let mut plan = DeformPlan {
        frames,
        cameras: cameras.to_vec(),
        slots: (1..=frames.frame_count).collect(),
        settings: cfg.render.settings().with_mask(MaskMode::Off),
        lr: &cfg.lr,
        steps,
        extent,
        tv_weight: cfg.deform.field.tv_weight,
        train_heads: options.train_heads,
    };
    let opts = LoopOptions {
        steps,
        batch_size: cfg.batch_size,
        densify: Some(cfg.densify.clone()),
        extent,
        deterministic: cfg.deterministic,
    };
    run_stage(model, &mut plan, &opts, rng)
}
