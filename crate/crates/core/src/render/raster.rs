//! Depth-sorted front-to-back compositing and its reverse pass.

use nalgebra::Vector2;

use super::project::{
    project_backward, project_gaussian, GaussianGrad, SplatGrad, SplattedGaussian,
};
use super::RenderSettings;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::scene::{Camera, GaussianPrimitive, Vec3};

/// Side length of the culling bins. Bins only restrict which splats a pixel
/// visits; the compositing order is the global depth order.
const BIN: usize = 8;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Contribution {
    pub splat: u32,
    pub alpha: f64,
    pub t_before: f64,
    pub weight: f64,
    pub clamped: bool,
}

/// Forward result plus everything the backward pass needs.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    /// Final image: affine color tune applied and clamped to `[0, 1]`.
    pub image: Image,
    /// Composited color before the color tune.
    pub composite: Image,
    /// Transmittance left after compositing, per pixel.
    pub transmittance: Vec<f64>,
    /// Visible splats in compositing order.
    pub splats: Vec<SplattedGaussian>,
    pub(crate) offsets: Vec<usize>,
    pub(crate) contribs: Vec<Contribution>,
    pub(crate) source_count: usize,
    pub(crate) gain: Vec3,
    pub(crate) bias: Vec3,
    pub(crate) backdrop: Option<Image>,
}

impl RenderOutput {
    /// Number of splats that touched pixel `(x, y)`.
    pub fn contribution_count(&self, x: usize, y: usize) -> usize {
        let p = y * self.image.width + x;
        self.offsets[p + 1] - self.offsets[p]
    }
}

/// Gradient of a loss w.r.t. the camera color tune.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CameraGrad {
    pub gain: Vec3,
    pub bias: Vec3,
}

impl CameraGrad {
    pub fn add_assign(&mut self, o: &CameraGrad) {
        self.gain += o.gain;
        self.bias += o.bias;
    }
}

/// Output of [`render_backward`].
#[derive(Clone, Debug)]
pub struct RenderGradients {
    /// One entry per rendered primitive (zero for culled ones).
    pub gaussians: Vec<GaussianGrad>,
    pub camera: CameraGrad,
    /// Gradient w.r.t. the projected mean in normalized device units, for
    /// primitives that were visible.
    pub mean2d_ndc: Vec<Option<Vector2<f64>>>,
}

/// Front-to-back over-compositing of `(color, alpha)` pairs with early
/// termination once transmittance would drop below `min_transmittance`.
pub fn composite_pixel(
    contributions: &[(Vec3, f64)],
    background: Vec3,
    min_transmittance: f64,
) -> Vec3 {
    let mut c = Vec3::zeros();
    let mut t = 1.0;
    for (color, alpha) in contributions {
        let next = t * (1.0 - alpha);
        if next < min_transmittance {
            break;
        }
        c += color * (alpha * t);
        t = next;
    }
    c + background * t
}

fn sort_key(a: &SplattedGaussian, b: &SplattedGaussian) -> std::cmp::Ordering {
    // Ties beyond depth are broken on splat content so the order never
    // depends on the input order.
    a.depth
        .total_cmp(&b.depth)
        .then(a.mean2d.x.total_cmp(&b.mean2d.x))
        .then(a.mean2d.y.total_cmp(&b.mean2d.y))
        .then(a.alpha_base.total_cmp(&b.alpha_base))
        .then(a.color.x.total_cmp(&b.color.x))
        .then(a.color.y.total_cmp(&b.color.y))
        .then(a.color.z.total_cmp(&b.color.z))
        .then(a.cov2d[(0, 0)].total_cmp(&b.cov2d[(0, 0)]))
        .then(a.cov2d[(0, 1)].total_cmp(&b.cov2d[(0, 1)]))
        .then(a.cov2d[(1, 1)].total_cmp(&b.cov2d[(1, 1)]))
}

/// Render `gaussians` into `camera`.
pub fn render(
    gaussians: &[GaussianPrimitive],
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    render_impl(gaussians, camera, settings, None)
}

/// Like [`render`], but the leftover transmittance of each pixel reveals
/// `backdrop` (a composite before the color tune) instead of the constant
/// background. Nothing in `backdrop` can occlude the splats.
pub fn render_over(
    gaussians: &[GaussianPrimitive],
    camera: &Camera,
    settings: &RenderSettings,
    backdrop: &Image,
) -> Result<RenderOutput> {
    if backdrop.width != camera.width() || backdrop.height != camera.height() {
        return Err(Error::Internal("backdrop size differs from camera".into()));
    }
    render_impl(gaussians, camera, settings, Some(backdrop.clone()))
}

fn backdrop_pixel(backdrop: &Option<Image>, p: usize, fallback: Vec3) -> Vec3 {
    match backdrop {
        Some(b) => Vec3::new(b.data[p * 3], b.data[p * 3 + 1], b.data[p * 3 + 2]),
        None => fallback,
    }
}

fn render_impl(
    gaussians: &[GaussianPrimitive],
    camera: &Camera,
    settings: &RenderSettings,
    backdrop: Option<Image>,
) -> Result<RenderOutput> {
    let (w, h) = (camera.width(), camera.height());
    let mut splats = Vec::with_capacity(gaussians.len());
    for (i, g) in gaussians.iter().enumerate() {
        if let Some(mut s) = project_gaussian(g, camera, settings)? {
            s.source = i;
            splats.push(s);
        }
    }
    splats.sort_by(sort_key);

    let bins_x = w.div_ceil(BIN);
    let bins_y = h.div_ceil(BIN);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); bins_x * bins_y];
    for (si, s) in splats.iter().enumerate() {
        let (x0, x1, y0, y1) = s.bbox;
        for by in y0 / BIN..=y1 / BIN {
            for bx in x0 / BIN..=x1 / BIN {
                bins[by * bins_x + bx].push(si as u32);
            }
        }
    }

    let npix = w * h;
    let mut composite = Image::new(w, h);
    let mut transmittance = vec![1.0; npix];
    let mut offsets = Vec::with_capacity(npix + 1);
    let mut contribs = Vec::new();
    let bg = settings.background;
    for y in 0..h {
        for x in 0..w {
            offsets.push(contribs.len());
            let pixel = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut c = Vec3::zeros();
            let mut t = 1.0;
            for &si in &bins[(y / BIN) * bins_x + x / BIN] {
                let s = &splats[si as usize];
                let (x0, x1, y0, y1) = s.bbox;
                if x < x0 || x > x1 || y < y0 || y > y1 {
                    continue;
                }
                let weight = super::project::gaussian_weight(pixel, s);
                let raw = s.alpha_base * weight;
                let clamped = raw > settings.alpha_max;
                let alpha = if clamped { settings.alpha_max } else { raw };
                let next = t * (1.0 - alpha);
                if next < settings.min_transmittance {
                    break;
                }
                contribs.push(Contribution {
                    splat: si,
                    alpha,
                    t_before: t,
                    weight,
                    clamped,
                });
                c += s.color * (alpha * t);
                t = next;
            }
            let p = y * w + x;
            transmittance[p] = t;
            let c = c + backdrop_pixel(&backdrop, p, bg) * t;
            composite.data[p * 3..p * 3 + 3].copy_from_slice(c.as_slice());
        }
    }
    offsets.push(contribs.len());

    let mut image = composite.clone();
    for px in image.data.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = (camera.color_gain[c] * px[c] + camera.color_bias[c]).clamp(0.0, 1.0);
        }
    }

    Ok(RenderOutput {
        image,
        composite,
        transmittance,
        splats,
        offsets,
        contribs,
        source_count: gaussians.len(),
        gain: camera.color_gain,
        bias: camera.color_bias,
        backdrop,
    })
}

/// Reverse-mode pass: gradients of a loss w.r.t. every primitive parameter and
/// the camera color tune, given `d_image = ∂L/∂image`.
pub fn render_backward(
    gaussians: &[GaussianPrimitive],
    camera: &Camera,
    settings: &RenderSettings,
    forward: &RenderOutput,
    d_image: &Image,
) -> Result<RenderGradients> {
    if gaussians.len() != forward.source_count {
        return Err(Error::Internal(format!(
            "backward got {} primitives, forward rendered {}",
            gaussians.len(),
            forward.source_count
        )));
    }
    if !d_image.same_shape(&forward.image) {
        return Err(Error::Internal(
            "image gradient shape differs from render".into(),
        ));
    }
    if camera.color_gain != forward.gain || camera.color_bias != forward.bias {
        return Err(Error::Internal(
            "camera color changed between forward and backward".into(),
        ));
    }
    let w = forward.image.width;
    let mut splat_grads = vec![SplatGrad::default(); forward.splats.len()];
    let mut cam_grad = CameraGrad::default();
    let bg = settings.background;

    for p in 0..w * forward.image.height {
        let mut dpix = Vec3::zeros();
        let mut any = false;
        for c in 0..3 {
            let g = d_image.data[p * 3 + c];
            if g == 0.0 {
                continue;
            }
            let comp = forward.composite.data[p * 3 + c];
            let raw = forward.gain[c] * comp + forward.bias[c];
            if (0.0..=1.0).contains(&raw) {
                cam_grad.gain[c] += g * comp;
                cam_grad.bias[c] += g;
                dpix[c] = g * forward.gain[c];
                any = true;
            }
        }
        if !any {
            continue;
        }
        let (x, y) = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
        let pixel = Vector2::new(x, y);
        let list = &forward.contribs[forward.offsets[p]..forward.offsets[p + 1]];
        // Color accumulated behind the current splat, including background.
        let mut behind = backdrop_pixel(&forward.backdrop, p, bg) * forward.transmittance[p];
        for ct in list.iter().rev() {
            let s = &forward.splats[ct.splat as usize];
            let sg = &mut splat_grads[ct.splat as usize];
            let at = ct.alpha * ct.t_before;
            sg.color += dpix * at;
            let d_alpha = dpix.dot(&(s.color * ct.t_before - behind / (1.0 - ct.alpha)));
            behind += s.color * at;
            if ct.clamped {
                continue;
            }
            sg.alpha_base += d_alpha * ct.weight;
            let d_w = d_alpha * s.alpha_base;
            // weight = exp(-q / 2), q = dᵀ A d.
            let d_q = -0.5 * ct.weight * d_w;
            let d = pixel - s.mean2d;
            sg.mean2d += -2.0 * d_q * (s.conic * d);
            sg.conic += d_q * (d * d.transpose());
        }
    }

    let mut grads = vec![GaussianGrad::default(); gaussians.len()];
    let mut mean2d_ndc = vec![None; gaussians.len()];
    let half = Vector2::new(w as f64 * 0.5, forward.image.height as f64 * 0.5);
    for (s, sg) in forward.splats.iter().zip(&splat_grads) {
        let (g, dm) = project_backward(&gaussians[s.source], camera, settings, sg)?;
        grads[s.source] = g;
        mean2d_ndc[s.source] = Some(dm.component_mul(&half));
    }
    Ok(RenderGradients {
        gaussians: grads,
        camera: cam_grad,
        mean2d_ndc,
    })
}
