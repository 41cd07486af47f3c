//! Deterministic multi-view dynamic desk scenes with known decomposition and
//! trajectories.
//!
//! Ground-truth images are rendered with this crate's own rasterizer, so
//! they test recovery of structure and motion, not photometric fidelity
//! against an independent renderer.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::render::{render, RenderSettings};
use crate::scene::{
    normalized_time, Camera, FrameSet, GaussianCloud, GaussianPrimitive, Intrinsics, Quat, Vec3,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    pub height: f64,
    pub focal: f64,
    pub target: [f64; 3],
}

/// Static geometry made of Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackgroundComponent {
    /// Checkered horizontal plane of `cells × cells` flat Gaussians.
    Plane {
        center: [f64; 3],
        size: f64,
        cells: usize,
        colors: [[f64; 3]; 2],
    },
    /// Axis-aligned box with `per_face` Gaussians on each of its five visible faces.
    Box {
        center: [f64; 3],
        size: [f64; 3],
        per_face: usize,
        color: [f64; 3],
    },
}

/// Parametric path of a foreground component's center over `t ∈ [0, 1]`.
/// Amplitudes are multiples of the component radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Static,
    /// From `start` along `direction` for `amplitude` radii.
    Linear {
        direction: [f64; 3],
        amplitude: f64,
    },
    /// Horizontal circle of radius `amplitude` radii around `start`.
    Circular {
        amplitude: f64,
        turns: f64,
        phase: f64,
    },
    /// Evenly spaced stops from `start` along `direction` over `amplitude`
    /// radii, holding still for `segment_length` frames each.
    Hops {
        direction: [f64; 3],
        amplitude: f64,
        segment_length: usize,
    },
}

impl Trajectory {
    pub fn amplitude(&self) -> f64 {
        match self {
            Trajectory::Static => 0.0,
            Trajectory::Linear { amplitude, .. }
            | Trajectory::Circular { amplitude, .. }
            | Trajectory::Hops { amplitude, .. } => *amplitude,
        }
    }
}

/// A moving blob of Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForegroundComponent {
    pub name: String,
    pub radius: f64,
    pub count: usize,
    pub color: [f64; 3],
    pub start: [f64; 3],
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub image_size: usize,
    pub frame_count: usize,
    pub background_color: [f64; 3],
    pub cameras: CameraRing,
    /// Random per-camera gain in `1 ± p` and bias in `± p / 2`; 0 disables.
    #[serde(default)]
    pub color_perturbation: f64,
    #[serde(default)]
    pub background: Vec<BackgroundComponent>,
    #[serde(default)]
    pub foreground: Vec<ForegroundComponent>,
}

/// Preset foreground motions for [`SceneSpec::desk`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeskMotion {
    /// The blob stands still at its start position.
    Static,
    /// One blob crossing the desk, 10 radii.
    Linear,
    /// One blob on a circle of 4 radii (path length about 25 radii).
    Orbit,
    /// One blob hopping between stops, one stop per 16 frames.
    Hops,
}

impl SceneSpec {
    /// The default desk scene: 64×64 images, 8 ring cameras, 64 frames,
    /// about 300 background and 30 foreground Gaussians.
    pub fn desk(seed: u64, motion: DeskMotion) -> Self {
        let background = vec![
            BackgroundComponent::Plane {
                center: [0.0, 0.0, 0.0],
                size: 6.0,
                cells: 16,
                colors: [[0.75, 0.7, 0.6], [0.45, 0.35, 0.3]],
            },
            BackgroundComponent::Box {
                center: [-1.6, 1.8, 0.4],
                size: [0.8, 0.8, 0.8],
                per_face: 4,
                color: [0.2, 0.45, 0.75],
            },
            BackgroundComponent::Box {
                center: [1.8, -1.6, 0.3],
                size: [1.0, 0.6, 0.6],
                per_face: 4,
                color: [0.3, 0.7, 0.3],
            },
        ];
        let blob = |trajectory, start: [f64; 3]| ForegroundComponent {
            name: "blob".into(),
            radius: 0.5,
            count: 30,
            color: [0.9, 0.25, 0.15],
            start,
            trajectory,
        };
        let foreground = match motion {
            DeskMotion::Static => vec![blob(Trajectory::Static, [-2.5, 0.0, 0.6])],
            DeskMotion::Linear => vec![blob(
                Trajectory::Linear {
                    direction: [1.0, 0.0, 0.0],
                    amplitude: 10.0,
                },
                [-2.5, 0.0, 0.6],
            )],
            DeskMotion::Orbit => vec![blob(
                Trajectory::Circular {
                    amplitude: 4.0,
                    turns: 1.0,
                    phase: 0.0,
                },
                [0.0, 0.0, 0.6],
            )],
            DeskMotion::Hops => vec![blob(
                Trajectory::Hops {
                    direction: [1.0, 0.0, 0.0],
                    amplitude: 10.0,
                    segment_length: 16,
                },
                [-2.5, 0.0, 0.6],
            )],
        };
        Self {
            seed,
            image_size: 64,
            frame_count: 64,
            background_color: [0.0, 0.0, 0.0],
            cameras: CameraRing {
                count: 8,
                radius: 7.0,
                height: 3.0,
                focal: 70.0,
                target: [0.0, 0.0, 0.3],
            },
            color_perturbation: 0.0,
            background,
            foreground,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.background.is_empty() && self.foreground.is_empty() {
            return Err(Error::config("scene has no components"));
        }
        if self.cameras.count < 4 {
            return Err(Error::config("scene needs at least 4 cameras"));
        }
        if self.frame_count == 0 || self.image_size == 0 {
            return Err(Error::config(
                "scene needs frames and a positive image size",
            ));
        }
        for c in &self.foreground {
            if !(c.radius > 0.0) || c.count == 0 {
                return Err(Error::config(format!(
                    "foreground {} needs a positive radius and count",
                    c.name
                )));
            }
            if let Trajectory::Hops {
                segment_length: 0, ..
            } = c.trajectory
            {
                return Err(Error::config("hop segment length must be positive"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Center of foreground component `component` at normalized time `t`.
    pub fn ground_truth_position(&self, component: usize, t: f64) -> Result<Vec3> {
        let c = self
            .foreground
            .get(component)
            .ok_or_else(|| Error::UnknownComponent(format!("foreground component {component}")))?;
        let start = Vec3::from(c.start);
        let t = t.clamp(0.0, 1.0);
        Ok(match &c.trajectory {
            Trajectory::Static => start,
            Trajectory::Linear {
                direction,
                amplitude,
            } => start + unit(direction) * (amplitude * c.radius * t),
            Trajectory::Circular {
                amplitude,
                turns,
                phase,
            } => {
                let r = amplitude * c.radius;
                let a = phase + TAU * turns * t;
                start + Vec3::new(r * a.cos(), r * a.sin(), 0.0)
            }
            Trajectory::Hops {
                direction,
                amplitude,
                segment_length,
            } => {
                let t_frames = self.frame_count.max(1);
                let frame = 1 + (t * (t_frames - 1) as f64).round() as usize;
                let stops = t_frames.div_ceil(*segment_length);
                let stop = (frame - 1) / segment_length;
                let frac = if stops > 1 {
                    stop as f64 / (stops - 1) as f64
                } else {
                    0.0
                };
                start + unit(direction) * (amplitude * c.radius * frac)
            }
        })
    }

    pub fn ring_cameras(&self) -> Result<Vec<Camera>> {
        let ring = &self.cameras;
        let s = self.image_size as f64;
        let intr = Intrinsics {
            focal_x: ring.focal,
            focal_y: ring.focal,
            principal_x: s / 2.0,
            principal_y: s / 2.0,
            width: self.image_size,
            height: self.image_size,
        };
        let target = Vec3::from(ring.target);
        (0..ring.count)
            .map(|i| {
                let a = TAU * i as f64 / ring.count as f64;
                let eye = Vec3::new(ring.radius * a.cos(), ring.radius * a.sin(), ring.height);
                Camera::look_at(intr, eye, target, Vec3::new(0.0, 0.0, 1.0))
            })
            .collect()
    }
}

fn unit(v: &[f64; 3]) -> Vec3 {
    let v = Vec3::from(*v);
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

/// Which generator component a ground-truth Gaussian belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentLabel {
    pub name: String,
    /// Index into the spec's foreground list, for dynamic components.
    pub foreground_index: Option<usize>,
    pub dynamic: bool,
}

/// Generator output.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    /// Gaussians at frame 1.
    pub cloud: GaussianCloud,
    /// Component of each ground-truth Gaussian (index into `components`).
    pub labels: Vec<usize>,
    pub components: Vec<ComponentLabel>,
    /// Cameras with the true color tune used for rendering.
    pub true_cameras: Vec<Camera>,
    /// Cameras as handed to training (neutral color tune) plus all images.
    pub frames: FrameSet,
}

impl SyntheticScene {
    /// Ground-truth Gaussians at normalized time `t`.
    pub fn cloud_at(&self, t: f64) -> Result<GaussianCloud> {
        let mut cloud = self.cloud.clone();
        for (g, &label) in cloud.gaussians.iter_mut().zip(&self.labels) {
            if let Some(fi) = self.components[label].foreground_index {
                let offset = self.spec.ground_truth_position(fi, t)?
                    - self.spec.ground_truth_position(fi, 0.0)?;
                g.position += offset;
            }
        }
        Ok(cloud)
    }

    /// Whether ground-truth Gaussian `i` belongs to a moving component.
    pub fn is_dynamic(&self, i: usize) -> bool {
        self.components[self.labels[i]].dynamic
    }

    /// [`seed_from_points`] applied to the frame-1 ground truth.
    pub fn seed_cloud(&self, jitter: f64, opacity: f64, rng: &mut impl Rng) -> GaussianCloud {
        seed_from_points(&self.cloud, jitter, opacity, rng)
    }
}

/// Initial cloud from reference points: positions jittered by `jitter`, their
/// colors, low opacity and an isotropic scale from the point's size, much
/// like a structure-from-motion point cloud.
pub fn seed_from_points(
    points: &GaussianCloud,
    jitter: f64,
    opacity: f64,
    rng: &mut impl Rng,
) -> GaussianCloud {
    let gaussians = points
        .gaussians
        .iter()
        .map(|g| {
            let offset = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)) * jitter;
            let scale = g.scale().max().clamp(0.05, 0.3);
            GaussianPrimitive::new(
                g.position + offset,
                Vec3::repeat(scale.ln()),
                opacity,
                g.color,
            )
        })
        .collect();
    GaussianCloud::new(gaussians)
}

fn plane_gaussians(
    center: Vec3,
    size: f64,
    cells: usize,
    colors: &[[f64; 3]; 2],
    rng: &mut ChaCha8Rng,
) -> Vec<GaussianPrimitive> {
    let step = size / cells as f64;
    let mut out = Vec::with_capacity(cells * cells);
    for j in 0..cells {
        for i in 0..cells {
            let x = center.x - size / 2.0 + (i as f64 + 0.5) * step;
            let y = center.y - size / 2.0 + (j as f64 + 0.5) * step;
            let tone = Vec3::from(colors[(i / 2 + j / 2) % 2]);
            let tint = Vec3::from_fn(|_, _| rng.random_range(-0.03..0.03));
            let log_scale = Vec3::new((step * 0.6).ln(), (step * 0.6).ln(), (0.02f64).ln());
            out.push(GaussianPrimitive::new(
                Vec3::new(x, y, center.z),
                log_scale,
                0.95,
                tone + tint,
            ));
        }
    }
    out
}

fn box_gaussians(
    center: Vec3,
    size: Vec3,
    per_face: usize,
    color: Vec3,
    rng: &mut ChaCha8Rng,
) -> Vec<GaussianPrimitive> {
    let n = (per_face as f64).sqrt().ceil().max(1.0) as usize;
    let half = size / 2.0;
    let mut out = Vec::new();
    // Four sides and the top, each a grid of flat Gaussians.
    let faces: [(usize, f64); 5] = [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0)];
    for (fi, (axis, sign)) in faces.into_iter().enumerate() {
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let shade = 0.75 + 0.25 * (fi as f64 / 4.0);
        for k in 0..per_face {
            let (i, j) = (k % n, k / n);
            let mut p = center;
            p[axis] += sign * half[axis];
            p[a] += -half[a] + (i as f64 + 0.5) * size[a] / n as f64;
            p[b] += -half[b] + (j as f64 + 0.5) * size[b] / n as f64;
            let mut log_scale = Vec3::zeros();
            log_scale[axis] = 0.02f64.ln();
            log_scale[a] = (size[a] / n as f64 * 0.6).ln();
            log_scale[b] = (size[b] / n as f64 * 0.6).ln();
            let tint = Vec3::from_fn(|_, _| rng.random_range(-0.02..0.02));
            out.push(GaussianPrimitive::new(
                p,
                log_scale,
                0.95,
                color * shade + tint,
            ));
        }
    }
    out
}

fn blob_gaussians(c: &ForegroundComponent, rng: &mut ChaCha8Rng) -> Vec<GaussianPrimitive> {
    let center = Vec3::from(c.start);
    let color = Vec3::from(c.color);
    (0..c.count)
        .map(|_| {
            // Uniform in the ball of 0.7 radii, so the splats stay inside the radius.
            let dir = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
            let r = c.radius * 0.7 * rng.random::<f64>().cbrt();
            let mut g = GaussianPrimitive::new(
                center + dir * r,
                Vec3::repeat((c.radius * 0.3).ln()),
                0.9,
                color + Vec3::from_fn(|_, _| rng.random_range(-0.08..0.08)),
            );
            g.rotation = Quat::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            g
        })
        .collect()
}

/// Build the ground-truth cloud and render every (camera, frame) image.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gaussians = Vec::new();
    let mut labels = Vec::new();
    let mut components = Vec::new();
    for (ci, b) in spec.background.iter().enumerate() {
        let part = match b {
            BackgroundComponent::Plane {
                center,
                size,
                cells,
                colors,
            } => plane_gaussians(Vec3::from(*center), *size, *cells, colors, &mut rng),
            BackgroundComponent::Box {
                center,
                size,
                per_face,
                color,
            } => box_gaussians(
                Vec3::from(*center),
                Vec3::from(*size),
                *per_face,
                Vec3::from(*color),
                &mut rng,
            ),
        };
        labels.extend(std::iter::repeat_n(components.len(), part.len()));
        gaussians.extend(part);
        components.push(ComponentLabel {
            name: format!("background-{ci}"),
            foreground_index: None,
            dynamic: false,
        });
    }
    for (fi, c) in spec.foreground.iter().enumerate() {
        let part = blob_gaussians(c, &mut rng);
        labels.extend(std::iter::repeat_n(components.len(), part.len()));
        gaussians.extend(part);
        components.push(ComponentLabel {
            name: c.name.clone(),
            foreground_index: Some(fi),
            dynamic: c.trajectory.amplitude() > 0.0,
        });
    }

    let neutral = spec.ring_cameras()?;
    let mut true_cameras = neutral.clone();
    if spec.color_perturbation > 0.0 {
        let p = spec.color_perturbation;
        for cam in &mut true_cameras {
            cam.color_gain = Vec3::from_fn(|_, _| rng.random_range(1.0 - p..=1.0 + p));
            cam.color_bias = Vec3::from_fn(|_, _| rng.random_range(-p / 2.0..=p / 2.0));
        }
    }

    let mut scene = SyntheticScene {
        spec: spec.clone(),
        cloud: GaussianCloud::new(gaussians),
        labels,
        components,
        true_cameras,
        frames: FrameSet {
            cameras: neutral.clone(),
            images: Vec::new(),
            frame_count: spec.frame_count,
        },
    };
    let settings = RenderSettings {
        background: Vec3::from(spec.background_color),
        ..Default::default()
    };
    let clouds = (1..=spec.frame_count)
        .map(|f| scene.cloud_at(normalized_time(f, spec.frame_count)))
        .collect::<Result<Vec<_>>>()?;
    let images = scene
        .true_cameras
        .par_iter()
        .map(|cam| {
            clouds
                .iter()
                .map(|c| render(&c.gaussians, cam, &settings).map(|o| o.image))
                .collect::<Result<Vec<Image>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    scene.frames = FrameSet::new(neutral, images)?;
    Ok(scene)
}
