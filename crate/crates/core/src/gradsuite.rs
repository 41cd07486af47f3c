//! Central-difference check of the whole differentiable chain: motion field,
//! gamma, relaxed mask, projection, compositing, camera color tune and the
//! photometric loss, on small random scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::imaging::Image;
use crate::metrics::{photometric_loss, photometric_loss_grad, Ssim};
use crate::model::{accumulate_motion_grads, read_motion_values, write_motion_values};
use crate::motion::{HeadsConfig, HexPlaneConfig, MotionConfig, MotionField};
use crate::optim::layout::{accumulate_camera_grad, read_camera_values, write_camera_values};
use crate::optim::{
    finite_diff_check, CloudLayout, GradCheckOptions, GradCheckReport, ParameterStore,
};
use crate::render::{render, render_backward, MaskMode, RenderSettings};
use crate::scene::{Camera, GaussianCloud, GaussianPrimitive, Group, Intrinsics, Quat, Vec3};

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seeds: u64,
    pub image_size: usize,
    pub gaussians: usize,
    pub step: f64,
    pub lambda: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: 20,
            image_size: 32,
            gaussians: 8,
            step: 1e-4,
            lambda: 0.2,
        }
    }
}

struct Case {
    cloud: GaussianCloud,
    camera: Camera,
    motion: MotionField,
    t: f64,
    target: Image,
    settings: RenderSettings,
    ssim: Ssim,
    lambda: f64,
}

fn random_camera(rng: &mut ChaCha8Rng, size: usize) -> Result<Camera> {
    let s = size as f64;
    let intr = Intrinsics {
        focal_x: 1.06 * s,
        focal_y: s,
        principal_x: s / 2.0,
        principal_y: s / 2.0 - 0.5,
        width: size,
        height: size,
    };
    let eye = Vec3::new(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        -4.0,
    );
    let mut cam = Camera::look_at(intr, eye, Vec3::zeros(), Vec3::new(0.0, -1.0, 0.0))?;
    cam.color_gain = Vec3::from_fn(|_, _| rng.random_range(0.85..1.0));
    cam.color_bias = Vec3::from_fn(|_, _| rng.random_range(0.0..0.05));
    Ok(cam)
}

/// Mixed groups so every parameter class, gamma and both head sets appear.
fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> GaussianCloud {
    let gaussians = (0..n)
        .map(|i| {
            let pos = Vec3::from_fn(|_, _| rng.random_range(-0.7..0.7));
            let log_scale = Vec3::from_fn(|_, _| rng.random_range(0.12f64..0.35).ln());
            let color = Vec3::from_fn(|_, _| rng.random_range(0.1..0.9));
            let group = match i % 3 {
                0 => Group::Background,
                1 => Group::Foreground,
                _ => Group::Relay(0),
            };
            let mut g = GaussianPrimitive::new(pos, log_scale, rng.random_range(0.2..0.7), color)
                .with_group(group);
            g.rotation = Quat::from_fn(|_, _| rng.random_range(-1.0..1.0));
            g.sh1 = [0; 3].map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.1..0.1)));
            g.mask_logit = rng.random_range(-2.0..2.0);
            g.set_gamma(Vec3::from_fn(|_, _| rng.random_range(-1.5..0.5)));
            g
        })
        .collect();
    GaussianCloud::new(gaussians)
}

/// A target at least 0.05 away from `base` in every channel, so no pixel
/// sits on the L1 kink within a difference step.
fn target_near(rng: &mut ChaCha8Rng, base: &Image) -> Result<Image> {
    let data = base
        .data
        .iter()
        .map(|v| {
            let d = rng.random_range(0.05..0.4);
            if *v < 0.5 {
                v + d
            } else {
                v - d
            }
        })
        .collect();
    Image::from_data(base.width, base.height, data)
}

impl Case {
    fn new(seed: u64, opts: &SuiteOptions) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let case = Self::draw(&mut rng, opts)?;
            if case.clear_of_kinks(opts.step) {
                return Ok(case);
            }
        }
    }

    /// True when no Gaussian sits within a difference step of a grid cell
    /// boundary or a ReLU hinge, where one-sided slopes disagree.
    fn clear_of_kinks(&self, step: f64) -> bool {
        let margin = 100.0 * step;
        self.cloud.gaussians.iter().all(|g| {
            let (feature, _) = self.motion.grid.encode(&g.position, self.t);
            let heads = if g.group().is_background() && self.motion.isolate_heads {
                &self.motion.heads_bg
            } else {
                &self.motion.heads_fg
            };
            self.motion.grid.cell_boundary_distance(&g.position) > margin
                && heads
                    .preactivations(&feature)
                    .iter()
                    .all(|z| z.abs() > margin)
        })
    }

    fn draw(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<Self> {
        let cloud = random_cloud(rng, opts.gaussians);
        let camera = random_camera(rng, opts.image_size)?;
        let cfg = MotionConfig {
            hexplane: HexPlaneConfig {
                levels: 2,
                base_resolution: 3,
                time_resolution: 3,
                upsample: 2,
                features: 3,
                init_range: (0.1, 0.9),
            },
            heads: HeadsConfig { hidden: 6 },
            ..MotionConfig::default()
        };
        let mut motion = MotionField::for_cloud(&cfg, &cloud, rng)?;
        // Untrained heads output zero, which would hide the grid and gamma
        // gradients; use random small weights instead.
        for heads in [&mut motion.heads_bg, &mut motion.heads_fg] {
            let p = heads
                .params
                .iter()
                .map(|_| rng.random_range(-0.3..0.3))
                .collect();
            heads.set_params(p)?;
        }
        let settings = RenderSettings {
            background: Vec3::new(0.1, 0.2, 0.15),
            mask_mode: MaskMode::Relaxed,
            sh_degree: 1,
            // Wide culling so the truncation does not show up as a kink.
            cull_sigma: 8.0,
            ..Default::default()
        };
        let mut case = Self {
            t: rng.random_range(0.1..0.9),
            target: Image::new(opts.image_size, opts.image_size),
            cloud,
            camera,
            motion,
            settings,
            ssim: Ssim::default(),
            lambda: opts.lambda,
        };
        let base = case.render(&case.cloud, &case.camera, &case.motion)?;
        case.target = target_near(rng, &base)?;
        Ok(case)
    }

    fn deformed(
        &self,
        cloud: &GaussianCloud,
        motion: &MotionField,
    ) -> Result<Vec<(GaussianPrimitive, crate::motion::DeformCache)>> {
        cloud
            .gaussians
            .iter()
            .map(|g| motion.deform(g, self.t))
            .collect()
    }

    fn render(
        &self,
        cloud: &GaussianCloud,
        camera: &Camera,
        motion: &MotionField,
    ) -> Result<Image> {
        let gs: Vec<_> = self
            .deformed(cloud, motion)?
            .into_iter()
            .map(|d| d.0)
            .collect();
        Ok(render(&gs, camera, &self.settings)?.image)
    }

    fn store(&self) -> Result<(CloudLayout, ParameterStore)> {
        let layout = CloudLayout::new(&self.cloud);
        let mut store = ParameterStore::new();
        layout.write_values(&self.cloud, &mut store)?;
        write_camera_values(std::slice::from_ref(&self.camera), &mut store)?;
        write_motion_values(&self.motion, &mut store)?;

        let (deformed, caches): (Vec<_>, Vec<_>) = self
            .deformed(&self.cloud, &self.motion)?
            .into_iter()
            .unzip();
        let out = render(&deformed, &self.camera, &self.settings)?;
        let (_, d_image) =
            photometric_loss_grad(&out.image, &self.target, self.lambda, &self.ssim)?;
        let grads = render_backward(&deformed, &self.camera, &self.settings, &out, &d_image)?;
        let mut motion_grads = self.motion.zero_grads();
        let canonical: Vec<_> = self
            .cloud
            .gaussians
            .iter()
            .zip(&caches)
            .zip(&grads.gaussians)
            .map(|((g, c), d)| self.motion.deform_backward(g, c, d, &mut motion_grads))
            .collect();
        layout.accumulate_grads(&canonical, &mut store)?;
        accumulate_camera_grad(0, &grads.camera, &mut store)?;
        accumulate_motion_grads(&motion_grads, 1.0, &mut store)?;
        Ok((layout, store))
    }

    fn loss(&self, layout: &CloudLayout, store: &ParameterStore) -> Result<f64> {
        let mut cloud = self.cloud.clone();
        let mut cameras = vec![self.camera.clone()];
        let mut motion = self.motion.clone();
        layout.read_values(store, &mut cloud)?;
        read_camera_values(store, &mut cameras)?;
        read_motion_values(store, &mut motion)?;
        let image = self.render(&cloud, &cameras[0], &motion)?;
        photometric_loss(&image, &self.target, self.lambda, &self.ssim)
    }
}

/// Check one random scene; the report covers every store group.
pub fn gradient_case(seed: u64, opts: &SuiteOptions) -> Result<GradCheckReport> {
    let case = Case::new(seed, opts)?;
    let (layout, store) = case.store()?;
    let check = GradCheckOptions {
        step: opts.step,
        ..GradCheckOptions::default()
    };
    finite_diff_check(&store, |s| case.loss(&layout, s), &check)
}

/// [`gradient_case`] over seeds `0..opts.seeds`, merged.
pub fn gradient_suite(opts: &SuiteOptions) -> Result<GradCheckReport> {
    let mut total = GradCheckReport::default();
    for seed in 0..opts.seeds {
        total.merge(gradient_case(seed, opts)?);
    }
    Ok(total)
}
