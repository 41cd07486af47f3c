//! The optimization loop shared by all three stages: batch sampling, parallel
//! renders with an ordered gradient merge, Adam, and densification.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{GaussianFilter, Image};
use crate::metrics::{l1_loss_grad, photometric_loss_grad, Ssim};
use crate::model::{accumulate_motion_grads, read_motion_values, write_motion_values, Model};
use crate::motion::MotionGrads;
use crate::optim::layout::{accumulate_camera_grad, read_camera_values, write_camera_values};
use crate::optim::{
    adam_step, densify_and_prune, reset_opacity, AdamState, CloudLayout, DensifyConfig,
    DensifyStats, ParameterStore,
};
use crate::render::{
    render, render_backward, render_over, CameraGrad, GaussianGrad, RenderSettings,
};
use crate::scene::{Camera, GaussianPrimitive, Group, Vec3};

/// One (camera, slot) draw; the slot is a frame or a segment depending on
/// the stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub camera: usize,
    pub slot: usize,
}

/// Draw a batch of samples uniformly from `cameras × slots`.
pub fn sample_batch(
    rng: &mut ChaCha8Rng,
    cameras: &[usize],
    slots: &[usize],
    batch: usize,
) -> Vec<Sample> {
    (0..batch)
        .map(|_| Sample {
            camera: cameras[rng.random_range(0..cameras.len())],
            slot: slots[rng.random_range(0..slots.len())],
        })
        .collect()
}

/// Loss and gradients of one sample. Gaussian indices refer to the model
/// cloud.
#[derive(Clone, Debug, Default)]
pub struct SampleResult {
    pub loss: f64,
    pub gaussians: Vec<(usize, GaussianGrad)>,
    /// Screen-space gradient norm and position gradient of each drawn
    /// Gaussian, for densification statistics.
    pub screen: Vec<(usize, f64, Vec3)>,
    pub camera: Option<(usize, CameraGrad)>,
    pub motion: Option<MotionGrads>,
}

/// Image loss used by a stage, optionally on blurred images.
#[derive(Clone, Debug)]
pub enum ImageLoss {
    /// `(1 − λ)·L1 + λ·D-SSIM`.
    Photometric {
        lambda: f64,
        ssim: Ssim,
    },
    L1,
}

impl ImageLoss {
    pub fn grad(&self, render: &Image, target: &Image) -> Result<(f64, Image)> {
        match self {
            ImageLoss::Photometric { lambda, ssim } => {
                photometric_loss_grad(render, target, *lambda, ssim)
            }
            ImageLoss::L1 => l1_loss_grad(render, target),
        }
    }
}

/// Render `gaussians`, compare with `target` (both blurred by `blur` when
/// given; the target is expected to be blurred already) and backpropagate.
/// `indices[i]` is the cloud index of `gaussians[i]`. With a `backdrop` the
/// splats are composited over that image instead of the background color.
pub fn render_sample(
    gaussians: &[GaussianPrimitive],
    indices: &[usize],
    camera: &Camera,
    settings: &RenderSettings,
    target: &Image,
    loss: &ImageLoss,
    blur: Option<&GaussianFilter>,
    backdrop: Option<&Image>,
) -> Result<(f64, Vec<GaussianGrad>, CameraGrad, Vec<(usize, f64)>)> {
    let out = match backdrop {
        Some(b) => render_over(gaussians, camera, settings, b)?,
        None => render(gaussians, camera, settings)?,
    };
    let (value, d_image) = match blur {
        Some(f) => {
            let (v, g) = loss.grad(&f.apply(&out.image), target)?;
            (v, f.transpose(&g))
        }
        None => loss.grad(&out.image, target)?,
    };
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss(value));
    }
    let grads = render_backward(gaussians, camera, settings, &out, &d_image)?;
    let screen = grads
        .mean2d_ndc
        .iter()
        .enumerate()
        .filter_map(|(k, g)| g.map(|g| (indices[k], g.norm())))
        .collect();
    Ok((value, grads.gaussians, grads.camera, screen))
}

/// What a stage contributes to the shared loop.
pub trait StagePlan: Sync {
    fn name(&self) -> &'static str;
    /// Cameras and slots to sample from.
    fn domain(&self) -> (&[usize], &[usize]);
    fn evaluate(&self, model: &Model, sample: Sample, step: usize) -> Result<SampleResult>;
    /// Learning rate of store group `name`, `None` to freeze it.
    fn rate(&self, name: &str, step: usize) -> Option<f64>;
    /// Gaussians that densification may touch.
    fn densify_eligible(&self, group: Group) -> bool;
    /// Called before each step.
    fn begin_step(&mut self, _step: usize) -> Result<()> {
        Ok(())
    }
    /// Regularizer added once per step; adds its gradient to `grads`.
    fn regularize(&self, _model: &Model, _grads: &mut MotionGrads) -> f64 {
        0.0
    }
}

#[derive(Clone, Debug)]
pub struct LoopOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub densify: Option<DensifyConfig>,
    /// Scene extent for densification scale thresholds.
    pub extent: f64,
    pub deterministic: bool,
}

/// Result of a stage run.
#[derive(Clone, Debug, Default)]
pub struct StageRun {
    pub losses: Vec<f64>,
    pub rejected_steps: usize,
    pub pruned: usize,
    pub cloned: usize,
    pub split: usize,
    pub adam: AdamState,
}

const MAX_CONSECUTIVE_REJECTIONS: usize = 10;

fn build_store(model: &Model, layout: &CloudLayout) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    layout.write_values(&model.cloud, &mut store)?;
    write_camera_values(&model.cameras, &mut store)?;
    if let Some(m) = &model.motion {
        write_motion_values(m, &mut store)?;
    }
    Ok(store)
}

fn read_store(store: &ParameterStore, layout: &CloudLayout, model: &mut Model) -> Result<()> {
    layout.read_values(store, &mut model.cloud)?;
    read_camera_values(store, &mut model.cameras)?;
    if let Some(m) = &mut model.motion {
        read_motion_values(store, m)?;
    }
    Ok(())
}

/// Run `opts.steps` optimization steps of `plan` on `model`.
pub fn run_stage<P: StagePlan>(
    model: &mut Model,
    plan: &mut P,
    opts: &LoopOptions,
    rng: &mut ChaCha8Rng,
) -> Result<StageRun> {
    let (cameras, slots) = plan.domain();
    if cameras.is_empty() || slots.is_empty() {
        return Err(Error::config(format!("{}: nothing to sample", plan.name())));
    }
    let (cameras, slots) = (cameras.to_vec(), slots.to_vec());
    let mut layout = CloudLayout::new(&model.cloud);
    let mut store = build_store(model, &layout)?;
    let mut run = StageRun::default();
    let mut stats = DensifyStats::new(model.cloud.len());
    let mut rejections = 0;
    let scale = 1.0 / opts.batch_size as f64;

    for step in 1..=opts.steps {
        plan.begin_step(step)?;
        let batch = sample_batch(rng, &cameras, &slots, opts.batch_size);
        let results: Vec<Result<SampleResult>> = if opts.deterministic {
            batch
                .iter()
                .map(|s| plan.evaluate(model, *s, step))
                .collect()
        } else {
            batch
                .par_iter()
                .map(|s| plan.evaluate(model, *s, step))
                .collect()
        };

        let mut loss = 0.0;
        let mut grads = vec![GaussianGrad::default(); model.cloud.len()];
        let mut motion = model.motion.as_ref().map(|m| m.zero_grads());
        for r in results {
            let r = r?;
            loss += r.loss * scale;
            for (i, g) in &r.gaussians {
                grads[*i].add_assign(g);
            }
            for (i, norm, pos) in &r.screen {
                stats.record(*i, *norm, pos);
            }
            if let Some((c, g)) = &r.camera {
                let mut g = g.clone();
                g.gain *= scale;
                g.bias *= scale;
                accumulate_camera_grad(*c, &g, &mut store)?;
            }
            if let (Some(acc), Some(m)) = (&mut motion, &r.motion) {
                for (a, b) in [
                    (&mut acc.grid, &m.grid),
                    (&mut acc.heads_bg, &m.heads_bg),
                    (&mut acc.heads_fg, &m.heads_fg),
                ] {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y * scale);
                }
            }
        }
        grads.iter_mut().for_each(|g| g.scale(scale));
        layout.accumulate_grads(&grads, &mut store)?;
        if let Some(acc) = &mut motion {
            loss += plan.regularize(model, acc);
            accumulate_motion_grads(acc, 1.0, &mut store)?;
        }

        match adam_step(&mut store, &mut run.adam, |name| plan.rate(name, step)) {
            Ok(()) => rejections = 0,
            Err(e @ Error::NonFiniteGradient { .. }) => {
                log::warn!("{} step {step}: {e}; step skipped", plan.name());
                run.rejected_steps += 1;
                rejections += 1;
                if rejections >= MAX_CONSECUTIVE_REJECTIONS {
                    return Err(e);
                }
            }
            Err(e) => return Err(e),
        }
        read_store(&store, &layout, model)?;
        run.losses.push(loss);

        if let Some(d) = &opts.densify {
            if d.is_due(step, opts.steps) {
                let old = layout.clone();
                let out = densify_and_prune(
                    &mut model.cloud,
                    &stats,
                    d,
                    opts.extent,
                    |g| plan.densify_eligible(g),
                    rng,
                )?;
                if d.opacity_reset && step % d.opacity_reset_interval.max(1) == 0 {
                    reset_opacity(&mut model.cloud, 0.01, |g| plan.densify_eligible(g));
                }
                layout = CloudLayout::new(&model.cloud);
                CloudLayout::remap_moments(&old, &layout, &out.source, &mut run.adam);
                store = build_store(model, &layout)?;
                stats = DensifyStats::new(model.cloud.len());
                run.pruned += out.pruned;
                run.cloned += out.cloned;
                run.split += out.split;
                log::debug!(
                    "{} step {step}: pruned {}, cloned {}, split {}, {} gaussians",
                    plan.name(),
                    out.pruned,
                    out.cloned,
                    out.split,
                    model.cloud.len()
                );
            }
        }
        if step % 100 == 0 || step == opts.steps {
            log::info!(
                "{} step {step}/{}: loss {loss:.5}, {} gaussians",
                plan.name(),
                opts.steps,
                model.cloud.len()
            );
        }
    }
    run.adam.retain_matching(&store);
    Ok(run)
}

/// Radius of the camera rig: 1.1 times the largest distance of a camera
/// center from their mean.
pub fn camera_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let centers: Vec<Vec3> = cameras.iter().map(Camera::center).collect();
    let mean = centers.iter().sum::<Vec3>() / centers.len() as f64;
    let r = centers
        .iter()
        .map(|c| (c - mean).norm())
        .fold(0.0, f64::max);
    if r > 0.0 {
        1.1 * r
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Intrinsics;
    use rand::SeedableRng;

    #[test]
    fn batches_are_deterministic_and_in_domain() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let x = sample_batch(&mut a, &[0, 2, 3], &[1, 2, 3, 4], 16);
        let y = sample_batch(&mut b, &[0, 2, 3], &[1, 2, 3, 4], 16);
        assert_eq!(x, y);
        assert!(x
            .iter()
            .all(|s| [0, 2, 3].contains(&s.camera) && (1..=4).contains(&s.slot)));
    }

    #[test]
    fn extent_of_a_ring() {
        let intr = Intrinsics::centered(20.0, 16, 16);
        let cams: Vec<Camera> = (0..4)
            .map(|i| {
                let a = i as f64 * std::f64::consts::FRAC_PI_2;
                Camera::look_at(
                    intr,
                    Vec3::new(2.0 * a.cos(), 2.0 * a.sin(), 1.0),
                    Vec3::zeros(),
                    Vec3::z(),
                )
                .unwrap()
            })
            .collect();
        assert!((camera_extent(&cams) - 2.2).abs() < 1e-12);
    }
}
