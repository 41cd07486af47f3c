//! The trainable scene: Gaussians, camera color tunes, temporal segments and
//! the optional motion field.

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::motion::{active_set_for_frame, MotionField, MotionGrads};
use crate::optim::ParameterStore;
use crate::render::{render, MaskMode, RenderSettings};
use crate::scene::{Camera, GaussianCloud, GaussianPrimitive, Group, TemporalSegment};

pub const HEXPLANE_GROUP: &str = "hexplane";
pub const MLP_BG_GROUP: &str = "mlp-bg";
pub const MLP_FG_GROUP: &str = "mlp-fg";

/// How far the pipeline has taken a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Progress {
    Initialized,
    Masked,
    Relayed,
    Deformable,
}

impl Progress {
    pub fn completed_stage(self) -> u8 {
        self as u8
    }

    pub fn from_stage(stage: u8) -> Result<Self> {
        Ok(match stage {
            0 => Progress::Initialized,
            1 => Progress::Masked,
            2 => Progress::Relayed,
            3 => Progress::Deformable,
            _ => return Err(Error::Format(format!("unknown stage {stage}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cloud: GaussianCloud,
    /// Training cameras with their learned color tune.
    pub cameras: Vec<Camera>,
    pub segments: Vec<TemporalSegment>,
    pub motion: Option<MotionField>,
    pub frame_count: usize,
    pub progress: Progress,
}

impl Model {
    pub fn new(cloud: GaussianCloud, cameras: Vec<Camera>, frame_count: usize) -> Self {
        Self {
            cloud,
            cameras,
            segments: Vec::new(),
            motion: None,
            frame_count,
            progress: Progress::Initialized,
        }
    }

    /// Gaussians drawn at `frame` (1-based), deformed when a motion field
    /// exists, plus the mask mode to draw them with.
    pub fn frame_gaussians(
        &self,
        frame: usize,
        epsilon: f64,
    ) -> Result<(Vec<GaussianPrimitive>, MaskMode)> {
        match self.progress {
            Progress::Initialized | Progress::Masked => {
                let mode = if frame <= 1 || self.progress == Progress::Initialized {
                    MaskMode::Off
                } else {
                    MaskMode::Apply { epsilon }
                };
                Ok((self.cloud.gaussians.clone(), mode))
            }
            Progress::Relayed | Progress::Deformable => {
                let idx = active_set_for_frame(&self.cloud, frame, &self.segments);
                let t = crate::scene::normalized_time(frame, self.frame_count);
                let gaussians = idx
                    .iter()
                    .map(|&i| {
                        let g = &self.cloud.gaussians[i];
                        match &self.motion {
                            Some(m) => m.deform(g, t).map(|(d, _)| d),
                            None => Ok(g.clone()),
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((gaussians, MaskMode::Off))
            }
        }
    }

    /// Render `frame` from `camera`; any camera may be used, including ones
    /// that were held out of training.
    pub fn render_frame(
        &self,
        camera: &Camera,
        frame: usize,
        settings: &RenderSettings,
        epsilon: f64,
    ) -> Result<Image> {
        let (gaussians, mode) = self.frame_gaussians(frame, epsilon)?;
        Ok(render(&gaussians, camera, &settings.with_mask(mode))?.image)
    }

    /// Count of Gaussians per group kind: (background, foreground, relay).
    pub fn group_counts(&self) -> (usize, usize, usize) {
        (
            self.cloud.count(Group::is_background),
            self.cloud.count(|g| g == Group::Foreground),
            self.cloud.count(|g| matches!(g, Group::Relay(_))),
        )
    }
}

/// Copy motion-field parameters into store groups.
pub fn write_motion_values(motion: &MotionField, store: &mut ParameterStore) -> Result<()> {
    store.set(
        HEXPLANE_GROUP,
        motion.grid.config.features,
        motion.grid.data.clone(),
    )?;
    store.set(MLP_BG_GROUP, 1, motion.heads_bg.params.clone())?;
    store.set(MLP_FG_GROUP, 1, motion.heads_fg.params.clone())
}

pub fn read_motion_values(store: &ParameterStore, motion: &mut MotionField) -> Result<()> {
    motion
        .grid
        .data
        .copy_from_slice(store.values(HEXPLANE_GROUP)?);
    motion
        .heads_bg
        .params
        .copy_from_slice(store.values(MLP_BG_GROUP)?);
    motion
        .heads_fg
        .params
        .copy_from_slice(store.values(MLP_FG_GROUP)?);
    Ok(())
}

pub fn accumulate_motion_grads(
    grads: &MotionGrads,
    scale: f64,
    store: &mut ParameterStore,
) -> Result<()> {
    for (name, g) in [
        (HEXPLANE_GROUP, &grads.grid),
        (MLP_BG_GROUP, &grads.heads_bg),
        (MLP_FG_GROUP, &grads.heads_fg),
    ] {
        let dst = store.grads_mut(name)?;
        if dst.len() != g.len() {
            return Err(Error::Internal(format!(
                "{name} gradient has the wrong length"
            )));
        }
        for (d, v) in dst.iter_mut().zip(g) {
            *d += scale * v;
        }
    }
    Ok(())
}
