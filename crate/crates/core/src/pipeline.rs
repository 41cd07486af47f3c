//! Runs the three stages in order on a frame set.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::deform::{stage3_train, DeformOptions};
use crate::error::{Error, Result};
use crate::mask::{decouple, stage1_train, DecoupleReport};
use crate::metrics::{psnr, MetricReport, Ssim, ViewMetric};
use crate::model::{Model, Progress};
use crate::motion::MotionField;
use crate::optim::AdamState;
use crate::relay::{build_pseudo_views, cached_pseudo_views, replicate_relay, stage2_train};
use crate::scene::{segment_frames, FrameSet, GaussianCloud, Group};
use crate::synth::seed_from_points;
use crate::train::{camera_extent, StageRun};

/// Summary of one stage run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub gaussians: usize,
    pub pruned: usize,
    pub cloned: usize,
    pub split: usize,
    pub rejected_steps: usize,
    pub decouple: Option<DecoupleReport>,
    pub relay_copies: Option<usize>,
}

impl StageReport {
    fn from_run(stage: u8, run: &StageRun, model: &Model) -> Self {
        Self {
            stage,
            steps: run.losses.len(),
            losses: run.losses.clone(),
            gaussians: model.cloud.len(),
            pruned: run.pruned,
            cloned: run.cloned,
            split: run.split,
            rejected_steps: run.rejected_steps,
            decouple: None,
            relay_copies: None,
        }
    }
}

/// Random stream of `stage` for `seed`, independent of how many numbers
/// earlier stages drew, so stages can be resumed one at a time.
pub fn stage_rng(seed: u64, stage: u8) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64);
    rng
}

/// Binds a configuration to a frame set.
pub struct Trainer<'a> {
    pub config: PipelineConfig,
    pub frames: &'a FrameSet,
    pub train_cameras: Vec<usize>,
    pub extent: f64,
    /// Directory for cached pseudo-views; `None` keeps them in memory only.
    pub pseudo_view_cache: Option<PathBuf>,
    pub deform_options: DeformOptions,
}

impl<'a> Trainer<'a> {
    pub fn new(config: PipelineConfig, frames: &'a FrameSet) -> Result<Self> {
        config.validate()?;
        if frames.is_empty() {
            return Err(Error::config("frame set is empty"));
        }
        let n = frames.cameras.len();
        if let Some(&c) = config.test_cameras.iter().find(|&&c| c >= n) {
            return Err(Error::config(format!(
                "test camera {c} does not exist ({n} cameras)"
            )));
        }
        let train_cameras: Vec<usize> = (0..n)
            .filter(|c| !config.test_cameras.contains(c))
            .collect();
        if train_cameras.is_empty() {
            return Err(Error::config("every camera is held out for testing"));
        }
        let train: Vec<_> = train_cameras
            .iter()
            .map(|&c| frames.cameras[c].clone())
            .collect();
        Ok(Self {
            extent: camera_extent(&train),
            config,
            frames,
            train_cameras,
            pseudo_view_cache: None,
            deform_options: DeformOptions::default(),
        })
    }

    /// Model at the start of stage 1: every Gaussian in the background with
    /// the initial mask logit.
    pub fn initial_model(&self, mut cloud: GaussianCloud) -> Model {
        for g in &mut cloud.gaussians {
            g.set_group(Group::Background);
            g.mask_logit = self.config.mask.mask_logit_init;
        }
        Model::new(cloud, self.frames.cameras.clone(), self.frames.frame_count)
    }

    /// [`initial_model`](Self::initial_model) seeded from reference points
    /// with the configured jitter and opacity (random stream 0).
    pub fn seeded_model(&self, points: &GaussianCloud) -> Model {
        let init = &self.config.init;
        let cloud = seed_from_points(
            points,
            init.jitter,
            init.opacity,
            &mut stage_rng(self.config.seed, 0),
        );
        self.initial_model(cloud)
    }

    /// Run the stage following `model.progress`.
    pub fn run_next(&self, model: &mut Model) -> Result<(StageReport, AdamState)> {
        let cfg = &self.config;
        match model.progress {
            Progress::Initialized => {
                let mut rng = stage_rng(cfg.seed, 1);
                let run = stage1_train(
                    model,
                    self.frames,
                    &self.train_cameras,
                    cfg,
                    self.extent,
                    &mut rng,
                )?;
                let report = decouple(&mut model.cloud, cfg.mask.epsilon);
                model.progress = Progress::Masked;
                let mut r = StageReport::from_run(1, &run, model);
                r.decouple = Some(report);
                Ok((r, run.adam))
            }
            Progress::Masked => {
                let mut rng = stage_rng(cfg.seed, 2);
                let segments = segment_frames(
                    self.frames.frame_count,
                    cfg.relay.segment_length,
                    cfg.relay.frames_per_segment,
                )?;
                if !cfg.relay.replicate {
                    model.segments = segments;
                    model.progress = Progress::Relayed;
                    let r = StageReport {
                        stage: 2,
                        gaussians: model.cloud.len(),
                        relay_copies: Some(0),
                        ..StageReport::default()
                    };
                    return Ok((r, AdamState::new()));
                }
                let copies = replicate_relay(&mut model.cloud, &segments)?;
                model.segments = segments;
                let weights = cfg.relay.weights();
                let views = match &self.pseudo_view_cache {
                    Some(dir) => cached_pseudo_views(dir, self.frames, &model.segments, &weights)?,
                    None => build_pseudo_views(self.frames, &model.segments, &weights)?,
                };
                let run = stage2_train(
                    model,
                    &views,
                    &self.train_cameras,
                    cfg,
                    self.extent,
                    &mut rng,
                )?;
                model.progress = Progress::Relayed;
                let mut r = StageReport::from_run(2, &run, model);
                r.relay_copies = Some(copies);
                Ok((r, run.adam))
            }
            Progress::Relayed => {
                let mut rng = stage_rng(cfg.seed, 3);
                model.motion = Some(MotionField::for_cloud(
                    &cfg.deform.field,
                    &model.cloud,
                    &mut rng,
                )?);
                model.progress = Progress::Deformable;
                let run = stage3_train(
                    model,
                    self.frames,
                    &self.train_cameras,
                    cfg,
                    self.extent,
                    self.deform_options,
                    &mut rng,
                )?;
                Ok((StageReport::from_run(3, &run, model), run.adam))
            }
            Progress::Deformable => Err(Error::config("all stages are already complete")),
        }
    }

    /// Run stages until `model` has completed `last` (1 to 3).
    pub fn run_until(&self, model: &mut Model, last: u8) -> Result<(Vec<StageReport>, AdamState)> {
        let mut reports = Vec::new();
        let mut adam = AdamState::new();
        while model.progress.completed_stage() < last {
            let (r, a) = self.run_next(model)?;
            reports.push(r);
            adam = a;
        }
        Ok((reports, adam))
    }

    /// PSNR and SSIM of `model` against the frame set for every pair of
    /// `cameras` (default: the held-out cameras) and `frames`.
    pub fn evaluate(
        &self,
        model: &Model,
        cameras: Option<&[usize]>,
        frames: &[usize],
    ) -> Result<MetricReport> {
        evaluate(
            model,
            self.frames,
            cameras.unwrap_or(&self.config.test_cameras),
            frames,
            &self.config,
        )
    }
}

/// Evaluate `model` on `(camera, frame)` pairs of `data`.
pub fn evaluate(
    model: &Model,
    data: &FrameSet,
    cameras: &[usize],
    frames: &[usize],
    cfg: &PipelineConfig,
) -> Result<MetricReport> {
    if cameras.is_empty() || frames.is_empty() {
        return Err(Error::config(
            "evaluation needs at least one camera and one frame",
        ));
    }
    let settings = cfg.render.settings();
    let ssim = Ssim::new(cfg.loss.ssim_window, cfg.loss.ssim_sigma);
    let pairs: Vec<(usize, usize)> = cameras
        .iter()
        .flat_map(|&c| frames.iter().map(move |&f| (c, f)))
        .collect();
    let views = pairs
        .par_iter()
        .map(|&(c, f)| {
            if c >= data.cameras.len() || f == 0 || f > data.frame_count {
                return Err(Error::config(format!("no image for camera {c}, frame {f}")));
            }
            let camera = model.cameras.get(c).unwrap_or(&data.cameras[c]);
            let image = model.render_frame(camera, f, &settings, cfg.mask.epsilon)?;
            let target = data.image(c, f);
            Ok(ViewMetric {
                camera: c,
                frame: f,
                psnr: psnr(&image, target)?,
                ssim: ssim.ssim(&image, target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_views(views))
}
