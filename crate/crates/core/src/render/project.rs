//! EWA perspective projection of a 3D Gaussian and its adjoint.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2};

use super::{MaskMode, RenderSettings};
use crate::error::Result;
use crate::scene::{quat_to_matrix, sigmoid, Camera, GaussianPrimitive, Quat, Vec3};

/// Degree-1 real spherical-harmonic constant.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// A Gaussian after projection into one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct SplattedGaussian {
    /// Index of the source primitive in the rendered slice.
    pub source: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub color: Vec3,
    /// Opacity after the mask has been applied.
    pub alpha_base: f64,
    /// Inclusive pixel bounds `(x0, x1, y0, y1)` of the culling box.
    pub bbox: (usize, usize, usize, usize),
}

/// Splat-space gradients accumulated by the compositor.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct SplatGrad {
    pub mean2d: Vector2<f64>,
    /// Gradient w.r.t. all four conic entries (not symmetrized).
    pub conic: Matrix2<f64>,
    pub color: Vec3,
    pub alpha_base: f64,
}

/// Per-primitive gradient of a scalar loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub position: Vec3,
    pub log_scale: Vec3,
    pub rotation: Quat,
    pub opacity_logit: f64,
    pub color: Vec3,
    pub sh1: [Vec3; 3],
    pub mask_logit: f64,
    /// Filled by the deformation backward pass; the renderer leaves it zero.
    pub gamma: Vec3,
}

impl GaussianGrad {
    pub fn add_assign(&mut self, o: &GaussianGrad) {
        self.position += o.position;
        self.log_scale += o.log_scale;
        self.rotation += o.rotation;
        self.opacity_logit += o.opacity_logit;
        self.color += o.color;
        for k in 0..3 {
            self.sh1[k] += o.sh1[k];
        }
        self.mask_logit += o.mask_logit;
        self.gamma += o.gamma;
    }

    pub fn scale(&mut self, s: f64) {
        self.position *= s;
        self.log_scale *= s;
        self.rotation *= s;
        self.opacity_logit *= s;
        self.color *= s;
        for k in 0..3 {
            self.sh1[k] *= s;
        }
        self.mask_logit *= s;
        self.gamma *= s;
    }
}

/// Multiplier applied to the opacity by the mask, and its derivative w.r.t.
/// the mask logit (straight-through: the derivative of the sigmoid even when
/// the forward value is the hard threshold).
pub(crate) fn mask_factor(mode: MaskMode, mask_logit: f64) -> (f64, f64) {
    match mode {
        MaskMode::Off => (1.0, 0.0),
        MaskMode::Apply { epsilon } => {
            let s = sigmoid(mask_logit);
            (if s > epsilon { 1.0 } else { 0.0 }, s * (1.0 - s))
        }
        MaskMode::Relaxed => {
            let s = sigmoid(mask_logit);
            (s, s * (1.0 - s))
        }
    }
}

struct Geometry {
    p_cam: Vec3,
    j: Matrix2x3<f64>,
    w: Matrix3<f64>,
    rot: Matrix3<f64>,
    scale: Vec3,
    sigma: Matrix3<f64>,
    cov2d: Matrix2<f64>,
}

fn geometry(
    g: &GaussianPrimitive,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<Option<Geometry>> {
    let p_cam = camera.rotation * g.position + camera.translation;
    if p_cam.z <= settings.near {
        return Ok(None);
    }
    let rot = quat_to_matrix(&g.rotation)?;
    let scale = g.log_scale.map(f64::exp);
    let m = rot * Matrix3::from_diagonal(&scale);
    let sigma = m * m.transpose();
    let (fx, fy) = (camera.intrinsics.focal_x, camera.intrinsics.focal_y);
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    let j = Matrix2x3::new(
        fx / z,
        0.0,
        -fx * x / (z * z),
        0.0,
        fy / z,
        -fy * y / (z * z),
    );
    let w = camera.rotation;
    let jw = j * w;
    let cov = jw * sigma * jw.transpose();
    let cov2d = (cov + cov.transpose()) * 0.5 + Matrix2::identity() * settings.cov_blur;
    Ok(Some(Geometry {
        p_cam,
        j,
        w,
        rot,
        scale,
        sigma,
        cov2d,
    }))
}

fn view_color(g: &GaussianPrimitive, camera: &Camera, degree: u8) -> Vec3 {
    if degree == 0 {
        return g.color;
    }
    let d = (g.position - camera.center()).normalize();
    g.color + SH_C1 * (-d.y * g.sh1[0] + d.z * g.sh1[1] - d.x * g.sh1[2])
}

/// Project one primitive. `Ok(None)` means culled: behind the near plane or
/// with its `cull_sigma` box entirely outside the image.
pub fn project_gaussian(
    g: &GaussianPrimitive,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<Option<SplattedGaussian>> {
    let Some(geo) = geometry(g, camera, settings)? else {
        return Ok(None);
    };
    let intr = &camera.intrinsics;
    let z = geo.p_cam.z;
    let mean2d = Vector2::new(
        intr.focal_x * geo.p_cam.x / z + intr.principal_x,
        intr.focal_y * geo.p_cam.y / z + intr.principal_y,
    );
    let Some(conic) = geo.cov2d.try_inverse() else {
        return Ok(None);
    };
    let (a, b, c) = (geo.cov2d[(0, 0)], geo.cov2d[(0, 1)], geo.cov2d[(1, 1)]);
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
    let radius = settings.cull_sigma * lambda_max.sqrt();
    // Pixel x has its center at x + 0.5.
    let lo_x = (mean2d.x - radius - 0.5).ceil();
    let hi_x = (mean2d.x + radius - 0.5).floor();
    let lo_y = (mean2d.y - radius - 0.5).ceil();
    let hi_y = (mean2d.y + radius - 0.5).floor();
    let (w, h) = (intr.width as f64, intr.height as f64);
    if !(hi_x >= 0.0 && lo_x <= w - 1.0 && hi_y >= 0.0 && lo_y <= h - 1.0)
        || hi_x < lo_x
        || hi_y < lo_y
    {
        return Ok(None);
    }
    let bbox = (
        lo_x.max(0.0) as usize,
        hi_x.min(w - 1.0) as usize,
        lo_y.max(0.0) as usize,
        hi_y.min(h - 1.0) as usize,
    );
    let (m, _) = mask_factor(settings.mask_mode, g.mask_logit);
    Ok(Some(SplattedGaussian {
        source: usize::MAX,
        mean2d,
        cov2d: geo.cov2d,
        conic,
        depth: z,
        color: view_color(g, camera, settings.sh_degree),
        alpha_base: m * g.opacity(),
        bbox,
    }))
}

/// `exp(-½ dᵀ Σ⁻¹ d)` with `d = pixel - mean2d`.
#[inline]
pub fn gaussian_weight(pixel: Vector2<f64>, splat: &SplattedGaussian) -> f64 {
    let d = pixel - splat.mean2d;
    let q = d.dot(&(splat.conic * d));
    (-0.5 * q).exp()
}

/// Derivative of the rotation matrix entries w.r.t. the normalized quaternion,
/// contracted with `d_rot`.
fn rotation_vjp(qn: &Quat, d_rot: &Matrix3<f64>) -> Quat {
    let (w, x, y, z) = (qn[0], qn[1], qn[2], qn[3]);
    let g = |r: usize, c: usize| d_rot[(r, c)];
    let dw =
        2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    Quat::new(dw, dx, dy, dz)
}

/// Pull splat-space gradients back to the primitive's parameters. Returns the
/// primitive gradient and the gradient w.r.t. the pixel-space mean.
pub(crate) fn project_backward(
    g: &GaussianPrimitive,
    camera: &Camera,
    settings: &RenderSettings,
    grad: &SplatGrad,
) -> Result<(GaussianGrad, Vector2<f64>)> {
    let geo = geometry(g, camera, settings)?
        .ok_or_else(|| crate::error::Error::Internal("backward through a culled splat".into()))?;
    let mut out = GaussianGrad::default();
    let intr = &camera.intrinsics;
    let (fx, fy) = (intr.focal_x, intr.focal_y);
    let (x, y, z) = (geo.p_cam.x, geo.p_cam.y, geo.p_cam.z);

    // Opacity and mask.
    let (m, dm_dlogit) = mask_factor(settings.mask_mode, g.mask_logit);
    let o = g.opacity();
    out.opacity_logit = grad.alpha_base * m * o * (1.0 - o);
    out.mask_logit = grad.alpha_base * o * dm_dlogit;

    // Color, including the view-direction path of degree-1 SH.
    out.color = grad.color;
    if settings.sh_degree >= 1 {
        let v = g.position - camera.center();
        let n = v.norm();
        let d = v / n;
        out.sh1[0] = -SH_C1 * d.y * grad.color;
        out.sh1[1] = SH_C1 * d.z * grad.color;
        out.sh1[2] = -SH_C1 * d.x * grad.color;
        let dd = SH_C1
            * Vec3::new(
                -g.sh1[2].dot(&grad.color),
                -g.sh1[0].dot(&grad.color),
                g.sh1[1].dot(&grad.color),
            );
        out.position += (dd - d * d.dot(&dd)) / n;
    }

    // Conic -> 2D covariance.
    let conic = geo
        .cov2d
        .try_inverse()
        .ok_or_else(|| crate::error::Error::Internal("singular 2D covariance".into()))?;
    let d_cov = -(conic.transpose() * grad.conic * conic.transpose());
    let d_cov = (d_cov + d_cov.transpose()) * 0.5;

    // cov2d = M Σ Mᵀ with M = J W.
    let mm = geo.j * geo.w;
    let d_sigma = mm.transpose() * d_cov * mm;
    let d_mm = 2.0 * d_cov * mm * geo.sigma;
    let d_j = d_mm * geo.w.transpose();

    // J depends on the camera-space position.
    let z2 = z * z;
    let z3 = z2 * z;
    let mut d_pcam = Vec3::new(
        d_j[(0, 2)] * (-fx / z2),
        d_j[(1, 2)] * (-fy / z2),
        d_j[(0, 0)] * (-fx / z2)
            + d_j[(0, 2)] * (2.0 * fx * x / z3)
            + d_j[(1, 1)] * (-fy / z2)
            + d_j[(1, 2)] * (2.0 * fy * y / z3),
    );
    // Mean projection.
    let dm2 = grad.mean2d;
    d_pcam.x += dm2.x * fx / z;
    d_pcam.y += dm2.y * fy / z;
    d_pcam.z += -dm2.x * fx * x / z2 - dm2.y * fy * y / z2;
    out.position += camera.rotation.transpose() * d_pcam;

    // Σ = (R S)(R S)ᵀ.
    let s_mat = Matrix3::from_diagonal(&geo.scale);
    let rs = geo.rot * s_mat;
    let d_sym = d_sigma + d_sigma.transpose();
    let d_rs = d_sym * rs;
    for k in 0..3 {
        let ds_k: f64 = (0..3).map(|i| geo.rot[(i, k)] * d_rs[(i, k)]).sum();
        out.log_scale[k] = ds_k * geo.scale[k];
    }
    let d_rot = d_rs * s_mat;
    let n = g.rotation.norm();
    let qn = g.rotation / n;
    let dqn = rotation_vjp(&qn, &d_rot);
    out.rotation = (dqn - qn * qn.dot(&dqn)) / n;

    Ok((out, dm2))
}
