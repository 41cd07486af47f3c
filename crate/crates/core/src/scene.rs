//! Scene domain types: Gaussian primitives, cameras, frame sets and temporal
//! segments, plus the covariance construction every renderer shares.

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

pub type Vec3 = Vector3<f64>;
pub type Quat = Vector4<f64>;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Which part of the scene a Gaussian belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Background,
    Foreground,
    /// Copy of the foreground owned by the temporal segment with this index.
    Relay(usize),
}

impl Group {
    pub fn is_background(self) -> bool {
        matches!(self, Group::Background)
    }

    /// Numeric tag used by the file formats: 0 background, 1 foreground, 2 relay.
    pub fn tag(self) -> u32 {
        match self {
            Group::Background => 0,
            Group::Foreground => 1,
            Group::Relay(_) => 2,
        }
    }

    pub fn segment(self) -> Option<usize> {
        match self {
            Group::Relay(s) => Some(s),
            _ => None,
        }
    }

    pub fn from_tag(tag: u32, segment: i64) -> Result<Group> {
        match (tag, segment) {
            (0, _) => Ok(Group::Background),
            (1, _) => Ok(Group::Foreground),
            (2, s) if s >= 0 => Ok(Group::Relay(s as usize)),
            _ => Err(Error::Format(format!("bad group tag {tag}/{segment}"))),
        }
    }
}

/// One anisotropic 3D Gaussian.
///
/// `rotation` is a quaternion stored as `(w, x, y, z)`; it is normalized on
/// every use, so unnormalized values are legal. `gamma` scales the predicted
/// position offsets of foreground and relay Gaussians and is absent on the
/// background.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub position: Vec3,
    pub log_scale: Vec3,
    pub rotation: Quat,
    pub opacity_logit: f64,
    /// Base RGB color (view independent part).
    pub color: Vec3,
    /// Degree-1 spherical-harmonic coefficients, one RGB triple per basis.
    pub sh1: [Vec3; 3],
    pub mask_logit: f64,
    gamma: Option<Vec3>,
    group: Group,
}

impl GaussianPrimitive {
    pub fn new(position: Vec3, log_scale: Vec3, opacity: f64, color: Vec3) -> Self {
        Self {
            position,
            log_scale,
            rotation: Quat::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: logit(opacity),
            color,
            sh1: [Vec3::zeros(); 3],
            mask_logit: 0.0,
            gamma: None,
            group: Group::Background,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn group(&self) -> Group {
        self.group
    }

    pub fn gamma(&self) -> Option<&Vec3> {
        self.gamma.as_ref()
    }

    /// Mutable access to gamma; `None` on background Gaussians.
    pub fn gamma_mut(&mut self) -> Option<&mut Vec3> {
        self.gamma.as_mut()
    }

    /// Change group, creating a zero gamma when leaving the background and
    /// dropping it when joining the background.
    pub fn set_group(&mut self, group: Group) {
        self.group = group;
        match (group.is_background(), self.gamma.is_some()) {
            (true, true) => self.gamma = None,
            (false, false) => self.gamma = Some(Vec3::zeros()),
            _ => {}
        }
    }

    pub fn with_group(mut self, group: Group) -> Self {
        self.set_group(group);
        self
    }

    /// Set gamma; ignored (returns false) on background Gaussians.
    pub fn set_gamma(&mut self, gamma: Vec3) -> bool {
        match self.gamma.as_mut() {
            Some(g) => {
                *g = gamma;
                true
            }
            None => false,
        }
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        covariance_from_params(&self.log_scale, &self.rotation)
    }
}

/// Rotation matrix of a quaternion `(w, x, y, z)` after normalization.
pub fn quat_to_matrix(q: &Quat) -> Result<Matrix3<f64>> {
    let n = q.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidRotation);
    }
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// `R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))` and `R` from the normalized
/// quaternion. The result is symmetrized so it is exactly symmetric.
pub fn covariance_from_params(log_scale: &Vec3, rotation: &Quat) -> Result<Matrix3<f64>> {
    let r = quat_to_matrix(rotation)?;
    let s = log_scale.map(f64::exp);
    let m = r * Matrix3::from_diagonal(&s);
    let cov = m * m.transpose();
    Ok((cov + cov.transpose()) * 0.5)
}

/// A set of Gaussians plus a counter bumped on every densification pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<GaussianPrimitive>,
    pub generation: u64,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<GaussianPrimitive>) -> Self {
        Self {
            gaussians,
            generation: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn count(&self, pred: impl Fn(Group) -> bool) -> usize {
        self.gaussians.iter().filter(|g| pred(g.group())).count()
    }

    pub fn indices_where(&self, pred: impl Fn(Group) -> bool) -> Vec<usize> {
        self.gaussians
            .iter()
            .enumerate()
            .filter(|(_, g)| pred(g.group()))
            .map(|(i, _)| i)
            .collect()
    }

    /// Check that every relay index names an existing segment.
    pub fn validate(&self, segment_count: usize) -> Result<()> {
        for (i, g) in self.gaussians.iter().enumerate() {
            if let Group::Relay(s) = g.group() {
                if s >= segment_count {
                    return Err(Error::Internal(format!(
                        "gaussian {i} references segment {s} of {segment_count}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal_x: f64,
    pub focal_y: f64,
    pub principal_x: f64,
    pub principal_y: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square pixels with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self {
            focal_x: focal,
            focal_y: focal,
            principal_x: width as f64 / 2.0,
            principal_y: height as f64 / 2.0,
            width,
            height,
        }
    }
}

/// Calibrated camera with a world-to-camera rigid transform and a learnable
/// per-channel affine color tune. Camera space looks down `+z`, `x` right,
/// `y` down.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub color_gain: Vec3,
    pub color_bias: Vec3,
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        if !(intrinsics.focal_x > 0.0 && intrinsics.focal_y > 0.0) {
            return Err(Error::config("focal lengths must be positive"));
        }
        let rtr = rotation.transpose() * rotation;
        if (rtr - Matrix3::identity()).abs().max() > 1e-9 || rotation.determinant() < 0.0 {
            return Err(Error::config("camera rotation is not a proper rotation"));
        }
        Ok(Self {
            intrinsics,
            rotation,
            translation,
            color_gain: Vec3::repeat(1.0),
            color_bias: Vec3::zeros(),
        })
    }

    /// Camera at `eye` looking at `target`, with `up` roughly world-up.
    pub fn look_at(intrinsics: Intrinsics, eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::config(
                "look_at: up is parallel to the view direction",
            ));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation =
            Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(intrinsics, rotation, translation)
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }
}

/// Multi-view video from fixed cameras. Frame indices are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSet {
    pub cameras: Vec<Camera>,
    /// `images[camera][frame - 1]`.
    pub images: Vec<Vec<Image>>,
    pub frame_count: usize,
}

impl FrameSet {
    pub fn new(cameras: Vec<Camera>, images: Vec<Vec<Image>>) -> Result<Self> {
        if cameras.len() != images.len() {
            return Err(Error::Shape(format!(
                "{} cameras but {} image streams",
                cameras.len(),
                images.len()
            )));
        }
        let frame_count = images.first().map_or(0, Vec::len);
        for (cam, stream) in cameras.iter().zip(&images) {
            if stream.len() != frame_count {
                return Err(Error::Shape("image streams have different lengths".into()));
            }
            for img in stream {
                if img.width != cam.width() || img.height != cam.height() {
                    return Err(Error::Shape(format!(
                        "image {}x{} does not match camera {}x{}",
                        img.width,
                        img.height,
                        cam.width(),
                        cam.height()
                    )));
                }
            }
        }
        Ok(Self {
            cameras,
            images,
            frame_count,
        })
    }

    pub fn image(&self, camera: usize, frame: usize) -> &Image {
        &self.images[camera][frame - 1]
    }

    pub fn normalized_time(&self, frame: usize) -> f64 {
        normalized_time(frame, self.frame_count)
    }

    pub fn is_empty(&self) -> bool {
        self.frame_count == 0 || self.cameras.is_empty()
    }
}

/// `(frame - 1) / (T - 1)`, and 0 for single-frame sequences.
pub fn normalized_time(frame: usize, frame_count: usize) -> f64 {
    if frame_count <= 1 {
        0.0
    } else {
        (frame as f64 - 1.0) / (frame_count as f64 - 1.0)
    }
}

/// A contiguous inclusive frame range and the frames sampled from it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalSegment {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub selected_frames: Vec<usize>,
}

impl TemporalSegment {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, frame: usize) -> bool {
        (self.start..=self.end).contains(&frame)
    }

    /// Middle frame (rounded down), the same one `select_frames` picks.
    pub fn mid_frame(&self) -> usize {
        self.start + (self.end - self.start) / 2
    }
}

/// Split `[1, frame_count]` into consecutive segments of `k` frames (the last
/// may be shorter), each with `p` selected frames.
pub fn segment_frames(frame_count: usize, k: usize, p: usize) -> Result<Vec<TemporalSegment>> {
    if frame_count == 0 {
        return Err(Error::config("frame_count must be at least 1"));
    }
    if k < 2 {
        return Err(Error::config(format!(
            "segment length k = {k} must be at least 2"
        )));
    }
    let n = frame_count.div_ceil(k);
    Ok((0..n)
        .map(|index| {
            let start = index * k + 1;
            let end = ((index + 1) * k).min(frame_count);
            let mut seg = TemporalSegment {
                index,
                start,
                end,
                selected_frames: Vec::new(),
            };
            seg.selected_frames = select_frames(&seg, p);
            seg
        })
        .collect())
}

/// `p` evenly spaced frames including both ends; the interior picks round
/// down, so `[1, 16]` with `p = 3` gives `(1, 8, 16)`. Segments shorter than
/// `p` yield all their frames.
pub fn select_frames(segment: &TemporalSegment, p: usize) -> Vec<usize> {
    let span = segment.end - segment.start;
    if segment.len() <= p {
        return (segment.start..=segment.end).collect();
    }
    if p <= 1 {
        return vec![segment.start];
    }
    let mut out: Vec<usize> = (0..p).map(|i| segment.start + i * span / (p - 1)).collect();
    out.dedup();
    out
}

/// Segment containing `frame`, if any.
pub fn segment_of_frame(segments: &[TemporalSegment], frame: usize) -> Option<usize> {
    segments.iter().position(|s| s.contains(frame))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn quat_about_z(angle: f64) -> Quat {
        Quat::new((angle / 2.0).cos(), 0.0, 0.0, (angle / 2.0).sin())
    }

    #[test]
    fn covariance_identity() {
        let c = covariance_from_params(&Vec3::zeros(), &Quat::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(c, Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn covariance_scaled_axis() {
        let ls = Vec3::new(2f64.ln(), 0.0, 0.0);
        let c = covariance_from_params(&ls, &Quat::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(
            c,
            Matrix3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0)),
            epsilon = 1e-14
        );
        // 90 degrees about z swaps the x and y variances.
        let c = covariance_from_params(&ls, &quat_about_z(std::f64::consts::FRAC_PI_2)).unwrap();
        assert_relative_eq!(
            c,
            Matrix3::from_diagonal(&Vec3::new(1.0, 4.0, 1.0)),
            epsilon = 1e-14
        );
    }

    #[test]
    fn zero_quaternion_is_rejected() {
        let err = covariance_from_params(&Vec3::zeros(), &Quat::zeros()).unwrap_err();
        assert!(matches!(err, Error::InvalidRotation));
    }

    #[test]
    fn segment_examples() {
        let s = segment_frames(16, 16, 3).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].start, s[0].end), (1, 16));
        assert_eq!(s[0].selected_frames, vec![1, 8, 16]);

        let s = segment_frames(250, 16, 3).unwrap();
        assert_eq!(s.len(), 16);
        assert_eq!((s[15].start, s[15].end), (241, 250));
        assert_eq!(s[1].selected_frames, vec![17, 24, 32]);
        assert_eq!(s[15].selected_frames, vec![241, 245, 250]);

        let s = segment_frames(150, 16, 3).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!((s[9].start, s[9].end), (145, 150));

        assert!(segment_frames(10, 1, 3).is_err());
    }

    #[test]
    fn short_segment_falls_back_to_all_frames() {
        let seg = TemporalSegment {
            index: 0,
            start: 5,
            end: 6,
            selected_frames: vec![],
        };
        assert_eq!(select_frames(&seg, 3), vec![5, 6]);
    }

    #[test]
    fn group_switch_manages_gamma() {
        let mut g = GaussianPrimitive::new(Vec3::zeros(), Vec3::zeros(), 0.5, Vec3::zeros());
        assert!(g.gamma().is_none());
        assert!(!g.set_gamma(Vec3::repeat(1.0)));
        g.set_group(Group::Relay(2));
        assert_eq!(g.gamma(), Some(&Vec3::zeros()));
        g.set_group(Group::Background);
        assert!(g.gamma().is_none());
    }

    #[test]
    fn look_at_projects_target_to_center() {
        let intr = Intrinsics {
            focal_x: 50.0,
            focal_y: 50.0,
            principal_x: 32.0,
            principal_y: 32.0,
            width: 64,
            height: 64,
        };
        let eye = Vec3::new(5.0, 1.0, 2.0);
        let cam = Camera::look_at(intr, eye, Vec3::zeros(), Vec3::z()).unwrap();
        let p = cam.rotation * Vec3::zeros() + cam.translation;
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && p.z > 0.0);
        assert_relative_eq!(cam.center(), eye, epsilon = 1e-12);
        // World up maps to image up (negative camera y).
        let up = cam.rotation * Vec3::z();
        assert!(up.y < 0.0);
    }

    fn arb_quat() -> impl Strategy<Value = Quat> {
        prop::array::uniform4(-1.0f64..1.0)
            .prop_filter("non-degenerate", |q| {
                q.iter().map(|v| v * v).sum::<f64>() > 1e-3
            })
            .prop_map(|q| Quat::new(q[0], q[1], q[2], q[3]))
    }

    proptest! {
        #[test]
        fn covariance_is_psd_and_sign_invariant(
            ls in prop::array::uniform3(-3.0f64..2.0),
            q in arb_quat(),
        ) {
            let ls = Vec3::new(ls[0], ls[1], ls[2]);
            let c = covariance_from_params(&ls, &q).unwrap();
            let c_neg = covariance_from_params(&ls, &(-q)).unwrap();
            prop_assert_eq!(c, c_neg);
            prop_assert!((c - c.transpose()).abs().max() <= 1e-12);
            let eig = c.symmetric_eigenvalues();
            let tol = 1e-12 * c.abs().max().max(1.0);
            prop_assert!(eig.iter().all(|&e| e >= -tol));
        }

        #[test]
        fn segments_tile_the_sequence(t in 1usize..400, k in 2usize..40) {
            let segs = segment_frames(t, k, 3).unwrap();
            prop_assert_eq!(segs.len(), t.div_ceil(k));
            let mut next = 1;
            for s in &segs {
                prop_assert_eq!(s.start, next);
                prop_assert!(s.end >= s.start);
                prop_assert!(s.selected_frames.iter().all(|f| s.contains(*f)));
                prop_assert_eq!(s.selected_frames[0], s.start);
                prop_assert_eq!(*s.selected_frames.last().unwrap(), s.end);
                next = s.end + 1;
            }
            prop_assert_eq!(next, t + 1);
        }
    }
}
