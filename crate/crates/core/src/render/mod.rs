//! Differentiable software rasterizer.
//!
//! Every primitive is projected with the EWA linearization, all splats are
//! sorted by camera depth once per image and composited front to back. The
//! forward pass keeps each pixel's contribution list so [`render_backward`]
//! can replay it in reverse and produce exact gradients for positions,
//! scales, rotations, opacities, colors, mask logits and the camera color
//! tune.

mod project;
mod raster;

pub use project::{gaussian_weight, project_gaussian, GaussianGrad, SplattedGaussian, SH_C1};
pub use raster::{
    composite_pixel, render, render_backward, render_over, CameraGrad, RenderGradients,
    RenderOutput,
};

use serde::{Deserialize, Serialize};

use crate::scene::Vec3;

/// How the learnable mask enters the opacity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MaskMode {
    /// Mask ignored.
    Off,
    /// Hard threshold `σ(m) > ε` with a straight-through gradient.
    Apply { epsilon: f64 },
    /// Smooth surrogate `σ(m)`; same gradient formula as `Apply`, used to
    /// check the straight-through path against finite differences.
    Relaxed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSettings {
    pub background: Vec3,
    pub mask_mode: MaskMode,
    /// 0 or 1.
    pub sh_degree: u8,
    /// Half-width of the per-splat culling box in standard deviations.
    pub cull_sigma: f64,
    pub min_transmittance: f64,
    pub alpha_max: f64,
    pub near: f64,
    /// Added to the diagonal of every 2D covariance (px²), which also floors
    /// its eigenvalues.
    pub cov_blur: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: Vec3::zeros(),
            mask_mode: MaskMode::Off,
            sh_degree: 0,
            cull_sigma: 3.0,
            min_transmittance: 1e-4,
            alpha_max: 0.999,
            near: 0.01,
            cov_blur: 0.3,
        }
    }
}

impl RenderSettings {
    pub fn with_mask(&self, mask_mode: MaskMode) -> Self {
        Self {
            mask_mode,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Image;
    use crate::scene::{Camera, GaussianPrimitive, Intrinsics, Quat};
    use nalgebra::{Matrix3, Vector2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intrinsics(size: usize, f: f64) -> Intrinsics {
        Intrinsics {
            focal_x: f,
            focal_y: f,
            principal_x: size as f64 / 2.0,
            principal_y: size as f64 / 2.0,
            width: size,
            height: size,
        }
    }

    fn axis_camera(size: usize, f: f64) -> Camera {
        Camera::new(intrinsics(size, f), Matrix3::identity(), Vec3::zeros()).unwrap()
    }

    #[test]
    fn isotropic_projection_matches_analytic_jacobian() {
        let cam = axis_camera(64, 40.0);
        let sigma: f64 = 0.2;
        let z = 4.0;
        let g = GaussianPrimitive::new(
            Vec3::new(0.0, 0.0, z),
            Vec3::repeat(sigma.ln()),
            0.5,
            Vec3::zeros(),
        );
        let s = project_gaussian(&g, &cam, &RenderSettings::default())
            .unwrap()
            .unwrap();
        let expect = (40.0 * sigma / z).powi(2) + 0.3;
        assert!((s.cov2d[(0, 0)] - expect).abs() < 1e-12);
        assert!((s.cov2d[(1, 1)] - expect).abs() < 1e-12);
        assert!(s.cov2d[(0, 1)].abs() < 1e-12);
        assert_eq!(s.mean2d, Vector2::new(32.0, 32.0));
    }

    #[test]
    fn projection_cross_checks_against_sampling() {
        // Off-axis anisotropic Gaussian: project 1e5 samples through the
        // pinhole and fit a 2D covariance; the linearization must agree to a
        // few percent at this size/depth ratio.
        let cam = axis_camera(64, 50.0);
        let mut g = GaussianPrimitive::new(
            Vec3::new(0.4, -0.3, 5.0),
            Vec3::new(0.08f64.ln(), 0.05f64.ln(), 0.12f64.ln()),
            0.5,
            Vec3::zeros(),
        );
        g.rotation = Quat::new(0.9, 0.2, -0.3, 0.1);
        let settings = RenderSettings {
            cov_blur: 0.0,
            ..Default::default()
        };
        let s = project_gaussian(&g, &cam, &settings).unwrap().unwrap();
        let cov = g.covariance().unwrap();
        let l = cov.cholesky().unwrap().l();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = rand_distr::StandardNormal;
        let n = 100_000;
        let pts: Vec<Vector2<f64>> = (0..n)
            .map(|_| {
                let z = Vec3::new(rng.sample(normal), rng.sample(normal), rng.sample(normal));
                let p = g.position + l * z;
                Vector2::new(50.0 * p.x / p.z + 32.0, 50.0 * p.y / p.z + 32.0)
            })
            .collect();
        let mean = pts.iter().sum::<Vector2<f64>>() / n as f64;
        let mut c = nalgebra::Matrix2::zeros();
        for p in &pts {
            let d = p - mean;
            c += d * d.transpose();
        }
        c /= n as f64 - 1.0;
        let rel = (c - s.cov2d).abs().max() / s.cov2d.abs().max();
        assert!(rel < 0.03, "sampled {c} vs linearized {}", s.cov2d);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = axis_camera(32, 30.0);
        for z in [0.0, -1.0] {
            let g =
                GaussianPrimitive::new(Vec3::new(0.0, 0.0, z), Vec3::zeros(), 0.5, Vec3::zeros());
            assert!(project_gaussian(&g, &cam, &RenderSettings::default())
                .unwrap()
                .is_none());
        }
    }

    #[test]
    fn weight_examples() {
        let s = SplattedGaussian {
            source: 0,
            mean2d: Vector2::new(3.0, 4.0),
            cov2d: nalgebra::Matrix2::identity(),
            conic: nalgebra::Matrix2::identity(),
            depth: 1.0,
            color: Vec3::zeros(),
            alpha_base: 1.0,
            bbox: (0, 0, 0, 0),
        };
        assert_eq!(gaussian_weight(Vector2::new(3.0, 4.0), &s), 1.0);
        let w = gaussian_weight(Vector2::new(3.0 + 2f64.sqrt(), 4.0), &s);
        assert!((w - (-1f64).exp()).abs() < 1e-15);
        let mut prev = 1.0;
        for k in 1..50 {
            let w = gaussian_weight(Vector2::new(3.0 + 0.3 * k as f64, 4.0 + 0.1 * k as f64), &s);
            assert!(w < prev);
            prev = w;
        }
    }

    #[test]
    fn composite_examples() {
        let b = Vec3::new(0.1, 0.2, 0.3);
        assert_eq!(composite_pixel(&[], b, 1e-4), b);
        let c = Vec3::new(0.9, 0.5, 0.1);
        let one = composite_pixel(&[(c, 0.999)], Vec3::zeros(), 1e-4);
        assert!((one - c).abs().max() < 1e-3);
        let two = composite_pixel(
            &[(Vec3::repeat(1.0), 0.5), (Vec3::repeat(1.0), 0.5)],
            Vec3::zeros(),
            1e-4,
        );
        assert!((two - Vec3::repeat(0.75)).abs().max() < 1e-15);
    }

    fn blob(pos: Vec3, scale: f64, opacity: f64, color: Vec3) -> GaussianPrimitive {
        GaussianPrimitive::new(pos, Vec3::repeat(scale.ln()), opacity, color)
    }

    #[test]
    fn opaque_gaussian_covers_principal_pixel() {
        let cam = axis_camera(32, 30.0);
        let color = Vec3::new(0.2, 0.7, 0.4);
        // Half a pixel right and down so the mean sits on pixel (16, 16)'s center.
        let g = blob(
            Vec3::new(0.5 * 3.0 / 30.0, 0.5 * 3.0 / 30.0, 3.0),
            0.5,
            0.9999,
            color,
        );
        let out = render(&[g], &cam, &RenderSettings::default()).unwrap();
        let px = out.image.pixel(16, 16);
        for c in 0..3 {
            assert!((px[c] - color[c]).abs() < 1e-3);
        }
    }

    #[test]
    fn gain_scales_image() {
        let mut cam = axis_camera(16, 10.0);
        let settings = RenderSettings {
            background: Vec3::repeat(0.25),
            ..Default::default()
        };
        cam.color_gain = Vec3::repeat(2.0);
        let out = render(&[], &cam, &settings).unwrap();
        assert!(out.image.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_masks_leave_background() {
        let cam = axis_camera(16, 10.0);
        let mut gs: Vec<_> = (0..5)
            .map(|i| {
                blob(
                    Vec3::new(0.1 * i as f64, 0.0, 3.0),
                    0.3,
                    0.8,
                    Vec3::repeat(1.0),
                )
            })
            .collect();
        for g in &mut gs {
            g.mask_logit = -10.0;
        }
        let settings = RenderSettings {
            background: Vec3::new(0.1, 0.2, 0.3),
            mask_mode: MaskMode::Apply { epsilon: 0.01 },
            ..Default::default()
        };
        let out = render(&gs, &cam, &settings).unwrap();
        let bg = Image::filled(16, 16, [0.1, 0.2, 0.3]);
        assert_eq!(out.image, bg);
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<GaussianPrimitive> {
        (0..n)
            .map(|_| {
                let mut g = GaussianPrimitive::new(
                    Vec3::new(
                        rng.random_range(-0.6..0.6),
                        rng.random_range(-0.6..0.6),
                        rng.random_range(3.0..4.5),
                    ),
                    Vec3::new(
                        rng.random_range(-2.3..-1.3),
                        rng.random_range(-2.3..-1.3),
                        rng.random_range(-2.3..-1.3),
                    ),
                    rng.random_range(0.2..0.8),
                    Vec3::new(
                        rng.random_range(0.1..0.9),
                        rng.random_range(0.1..0.9),
                        rng.random_range(0.1..0.9),
                    ),
                );
                g.rotation = Quat::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                g
            })
            .collect()
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gs = random_scene(&mut rng, 12);
        let cam = axis_camera(24, 30.0);
        let a = render(&gs, &cam, &RenderSettings::default()).unwrap();
        let mut rev = gs.clone();
        rev.reverse();
        rev.swap(0, 5);
        let b = render(&rev, &cam, &RenderSettings::default()).unwrap();
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn zero_image_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gs = random_scene(&mut rng, 6);
        let cam = axis_camera(16, 20.0);
        let s = RenderSettings::default();
        let out = render(&gs, &cam, &s).unwrap();
        let grads = render_backward(&gs, &cam, &s, &out, &Image::new(16, 16)).unwrap();
        assert!(grads
            .gaussians
            .iter()
            .all(|g| *g == GaussianGrad::default()));
        assert_eq!(grads.camera, CameraGrad::default());
    }

    #[test]
    fn backward_rejects_mismatched_state() {
        let cam = axis_camera(8, 10.0);
        let g = blob(Vec3::new(0.0, 0.0, 2.0), 0.2, 0.5, Vec3::repeat(0.5));
        let s = RenderSettings::default();
        let out = render(std::slice::from_ref(&g), &cam, &s).unwrap();
        assert!(
            render_backward(&[g.clone(), g.clone()], &cam, &s, &out, &Image::new(8, 8)).is_err()
        );
        assert!(render_backward(&[g], &cam, &s, &out, &Image::new(4, 4)).is_err());
    }

    /// Loss = Σ target ⊙ image (linear, so finite differences only see the
    /// renderer's own curvature).
    fn linear_loss(
        gs: &[GaussianPrimitive],
        cam: &Camera,
        s: &RenderSettings,
        target: &Image,
    ) -> f64 {
        let out = render(gs, cam, s).unwrap();
        out.image
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| a * b)
            .sum()
    }

    #[test]
    fn mask_gradient_is_straight_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut gs = random_scene(&mut rng, 4);
        for (i, g) in gs.iter_mut().enumerate() {
            g.mask_logit = [-1.0, 0.0, 0.5, 2.0][i];
        }
        let cam = axis_camera(16, 20.0);
        let mut target = Image::new(16, 16);
        target
            .data
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        let relaxed = RenderSettings {
            mask_mode: MaskMode::Relaxed,
            cull_sigma: 8.0,
            ..Default::default()
        };
        let out = render(&gs, &cam, &relaxed).unwrap();
        let grads = render_backward(&gs, &cam, &relaxed, &out, &target).unwrap();
        let h = 1e-5;
        for i in 0..gs.len() {
            let mut p = gs.clone();
            p[i].mask_logit += h;
            let mut m = gs.clone();
            m[i].mask_logit -= h;
            let fd = (linear_loss(&p, &cam, &relaxed, &target)
                - linear_loss(&m, &cam, &relaxed, &target))
                / (2.0 * h);
            let an = grads.gaussians[i].mask_logit;
            assert!(
                (fd - an).abs() <= 1e-6 * fd.abs().max(1e-6),
                "{i}: fd {fd} an {an}"
            );
        }
        // The hard mask passes σ'(m) through unchanged: its gradient equals
        // the opacity-space gradient times o·σ'(m).
        let hard = relaxed.with_mask(MaskMode::Apply { epsilon: 0.01 });
        let out = render(&gs, &cam, &hard).unwrap();
        let grads = render_backward(&gs, &cam, &hard, &out, &target).unwrap();
        for (g, gr) in gs.iter().zip(&grads.gaussians) {
            let o = g.opacity();
            let sm = crate::scene::sigmoid_grad(g.mask_logit);
            // d/d(opacity_logit) = dô·M·o(1-o) and M = 1 here.
            let d_ohat = gr.opacity_logit / (o * (1.0 - o));
            assert!((gr.mask_logit - d_ohat * o * sm).abs() < 1e-12);
        }
    }

    #[test]
    fn backdrop_matches_constant_background_and_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let gs = random_scene(&mut rng, 5);
        let cam = axis_camera(16, 20.0);
        let s = RenderSettings {
            background: Vec3::new(0.2, 0.4, 0.6),
            cull_sigma: 8.0,
            ..Default::default()
        };
        let flat = Image::filled(16, 16, [0.2, 0.4, 0.6]);
        assert_eq!(
            render(&gs, &cam, &s).unwrap().image,
            render_over(&gs, &cam, &s, &flat).unwrap().image
        );

        let mut backdrop = Image::new(16, 16);
        backdrop
            .data
            .iter_mut()
            .for_each(|v| *v = rng.random_range(0.0..1.0));
        let mut target = Image::new(16, 16);
        target
            .data
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        let loss = |gs: &[GaussianPrimitive]| -> f64 {
            let out = render_over(gs, &cam, &s, &backdrop).unwrap();
            out.image
                .data
                .iter()
                .zip(&target.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        let out = render_over(&gs, &cam, &s, &backdrop).unwrap();
        let grads = render_backward(&gs, &cam, &s, &out, &target).unwrap();
        let h = 1e-6;
        for i in 0..gs.len() {
            for axis in 0..3 {
                let (mut p, mut m) = (gs.to_vec(), gs.to_vec());
                p[i].position[axis] += h;
                m[i].position[axis] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                let an = grads.gaussians[i].position[axis];
                assert!(
                    (fd - an).abs() <= 1e-5 * fd.abs().max(1e-3),
                    "{i}/{axis}: fd {fd} an {an}"
                );
            }
            let (mut p, mut m) = (gs.to_vec(), gs.to_vec());
            p[i].opacity_logit += h;
            m[i].opacity_logit -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - grads.gaussians[i].opacity_logit).abs() <= 1e-5 * fd.abs().max(1e-3));
        }
    }
}
