//! Time-dependent deformation: a HexPlane feature grid feeding two sets of
//! deformation heads, one for the background and one for the foreground and
//! relay Gaussians.

mod heads;
mod hexplane;

pub use heads::{DeformationHeads, Deltas, HeadsCache, HeadsConfig, HEAD_DIMS};
pub use hexplane::{EncodeCache, HexPlane, HexPlaneConfig, PLANE_AXES};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::GaussianGrad;
use crate::scene::{
    segment_of_frame, GaussianCloud, GaussianPrimitive, Group, TemporalSegment, Vec3,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionConfig {
    pub hexplane: HexPlaneConfig,
    pub heads: HeadsConfig,
    /// Separate head sets for background and foreground. When false every
    /// Gaussian uses the foreground heads.
    pub isolate_heads: bool,
    /// Scale foreground position offsets by `1 + e^γ`.
    pub use_gamma: bool,
    pub tv_weight: f64,
    /// Relative padding of the grid bounds around the cloud.
    pub bounds_padding: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            hexplane: HexPlaneConfig::default(),
            heads: HeadsConfig::default(),
            isolate_heads: true,
            use_gamma: true,
            tv_weight: 1e-4,
            bounds_padding: 0.1,
        }
    }
}

/// Gradients of the motion-field parameters, laid out like their values.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionGrads {
    pub grid: Vec<f64>,
    pub heads_bg: Vec<f64>,
    pub heads_fg: Vec<f64>,
}

/// Per-Gaussian intermediate values of [`MotionField::deform`].
#[derive(Clone, Debug)]
pub struct DeformCache {
    feature: Vec<f64>,
    encode: EncodeCache,
    heads: HeadsCache,
    deltas: Deltas,
    foreground_heads: bool,
    /// `1 + e^γ` per axis, or ones.
    position_gain: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionField {
    pub grid: HexPlane,
    pub heads_bg: DeformationHeads,
    pub heads_fg: DeformationHeads,
    pub isolate_heads: bool,
    pub use_gamma: bool,
}

/// Axis-aligned bounds of `cloud`, padded by `padding` times the extent
/// (at least a small absolute margin).
pub fn cloud_bounds(cloud: &GaussianCloud, padding: f64) -> Result<(Vec3, Vec3)> {
    let first = cloud
        .gaussians
        .first()
        .ok_or_else(|| Error::config("cannot bound an empty cloud"))?;
    let (mut lo, mut hi) = (first.position, first.position);
    for g in &cloud.gaussians {
        lo = lo.inf(&g.position);
        hi = hi.sup(&g.position);
    }
    let pad = ((hi - lo) * padding).map(|v| v.max(1e-3));
    Ok((lo - pad, hi + pad))
}

impl MotionField {
    pub fn new<R: Rng>(
        cfg: &MotionConfig,
        bounds_min: Vec3,
        bounds_max: Vec3,
        rng: &mut R,
    ) -> Result<Self> {
        let grid = HexPlane::new(cfg.hexplane.clone(), bounds_min, bounds_max, rng)?;
        let dim = grid.output_dim();
        let heads_bg = DeformationHeads::new(dim, &cfg.heads, rng)?;
        let heads_fg = DeformationHeads::new(dim, &cfg.heads, rng)?;
        Ok(Self {
            grid,
            heads_bg,
            heads_fg,
            isolate_heads: cfg.isolate_heads,
            use_gamma: cfg.use_gamma,
        })
    }

    /// Field whose grid covers `cloud`.
    pub fn for_cloud<R: Rng>(
        cfg: &MotionConfig,
        cloud: &GaussianCloud,
        rng: &mut R,
    ) -> Result<Self> {
        let (lo, hi) = cloud_bounds(cloud, cfg.bounds_padding)?;
        Self::new(cfg, lo, hi, rng)
    }

    pub fn zero_grads(&self) -> MotionGrads {
        MotionGrads {
            grid: vec![0.0; self.grid.data.len()],
            heads_bg: vec![0.0; self.heads_bg.params.len()],
            heads_fg: vec![0.0; self.heads_fg.params.len()],
        }
    }

    fn uses_foreground_heads(&self, group: Group) -> bool {
        !self.isolate_heads || !group.is_background()
    }

    /// Attributes of `g` at normalized time `t`.
    pub fn deform(
        &self,
        g: &GaussianPrimitive,
        t: f64,
    ) -> Result<(GaussianPrimitive, DeformCache)> {
        let (feature, encode) = self.grid.encode(&g.position, t);
        let foreground_heads = self.uses_foreground_heads(g.group());
        let heads = if foreground_heads {
            &self.heads_fg
        } else {
            &self.heads_bg
        };
        let (deltas, heads_cache) = heads.forward(&feature);
        if !deltas.is_finite() {
            return Err(Error::Internal(
                "deformation heads produced a non-finite output".into(),
            ));
        }
        let position_gain = match g.gamma() {
            Some(gamma) if self.use_gamma => gamma.map(|v| 1.0 + v.exp()),
            _ => Vec3::repeat(1.0),
        };
        let mut out = g.clone();
        out.position += position_gain.component_mul(&Vec3::from(deltas.position));
        out.log_scale += Vec3::from(deltas.log_scale);
        for k in 0..4 {
            out.rotation[k] += deltas.rotation[k];
        }
        out.opacity_logit += deltas.opacity;
        Ok((
            out,
            DeformCache {
                feature,
                encode,
                heads: heads_cache,
                deltas,
                foreground_heads,
                position_gain,
            },
        ))
    }

    /// Map gradients w.r.t. the deformed attributes back to the canonical
    /// Gaussian (including gamma) and accumulate motion-field gradients.
    pub fn deform_backward(
        &self,
        g: &GaussianPrimitive,
        cache: &DeformCache,
        d: &GaussianGrad,
        grads: &mut MotionGrads,
    ) -> GaussianGrad {
        let mut out = d.clone();
        let d_pos = cache.position_gain.component_mul(&d.position);
        if self.use_gamma {
            if let Some(gamma) = g.gamma() {
                let delta = Vec3::from(cache.deltas.position);
                out.gamma += d
                    .position
                    .component_mul(&delta)
                    .component_mul(&gamma.map(f64::exp));
            }
        }
        let d_deltas = Deltas {
            position: [d_pos.x, d_pos.y, d_pos.z],
            rotation: [d.rotation[0], d.rotation[1], d.rotation[2], d.rotation[3]],
            log_scale: [d.log_scale.x, d.log_scale.y, d.log_scale.z],
            opacity: d.opacity_logit,
        };
        let (heads, head_grad) = if cache.foreground_heads {
            (&self.heads_fg, &mut grads.heads_fg)
        } else {
            (&self.heads_bg, &mut grads.heads_bg)
        };
        let d_feature = heads.backward(&cache.feature, &cache.heads, &d_deltas, head_grad);
        out.position += self
            .grid
            .backward(&cache.encode, &d_feature, &mut grads.grid);
        out
    }

    pub fn tv_loss(&self, weight: f64, grads: Option<&mut MotionGrads>) -> f64 {
        self.grid
            .tv_loss(weight, grads.map(|g| g.grid.as_mut_slice()))
    }
}

/// Indices of the Gaussians rendered at `frame`: background, unreplicated
/// foreground and the relay copies of the segment containing the frame.
pub fn active_set_for_frame(
    cloud: &GaussianCloud,
    frame: usize,
    segments: &[TemporalSegment],
) -> Vec<usize> {
    let seg = segment_of_frame(segments, frame);
    cloud.indices_where(|g| match g {
        Group::Background | Group::Foreground => true,
        Group::Relay(s) => Some(s) == seg,
    })
}

/// [`active_set_for_frame`] at normalized time `t`, clamped into `[0, 1]`.
pub fn active_set(
    cloud: &GaussianCloud,
    t: f64,
    segments: &[TemporalSegment],
    frame_count: usize,
) -> Vec<usize> {
    if !(0.0..=1.0).contains(&t) {
        log::warn!("time {t} outside [0, 1], clamping");
    }
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let frame = 1 + (t * frame_count.saturating_sub(1) as f64).round() as usize;
    active_set_for_frame(cloud, frame, segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::segment_frames;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> MotionConfig {
        MotionConfig {
            hexplane: HexPlaneConfig {
                base_resolution: 4,
                time_resolution: 3,
                features: 3,
                ..Default::default()
            },
            heads: HeadsConfig { hidden: 6 },
            ..Default::default()
        }
    }

    fn field(seed: u64) -> MotionField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MotionField::new(
            &small_cfg(),
            Vec3::repeat(-1.0),
            Vec3::repeat(1.0),
            &mut rng,
        )
        .unwrap()
    }

    fn fg_gaussian() -> GaussianPrimitive {
        GaussianPrimitive::new(
            Vec3::new(0.1, 0.2, -0.3),
            Vec3::repeat(-2.0),
            0.6,
            Vec3::repeat(0.5),
        )
        .with_group(Group::Relay(0))
    }

    /// Heads whose position output is the constant `d` and everything else zero.
    fn constant_position_heads(f: &mut MotionField, d: [f64; 3]) {
        let h = &mut f.heads_fg;
        let n = h.params.len();
        h.params[n - 11..n - 8].copy_from_slice(&d);
    }

    #[test]
    fn zero_heads_are_identity() {
        let f = field(0);
        for g in [fg_gaussian(), fg_gaussian().with_group(Group::Background)] {
            let (d, _) = f.deform(&g, 0.7).unwrap();
            assert_eq!(d, g);
        }
    }

    #[test]
    fn zero_gamma_doubles_position_offset() {
        let mut f = field(1);
        constant_position_heads(&mut f, [0.25, -0.5, 1.0]);
        let g = fg_gaussian();
        let (d, _) = f.deform(&g, 0.3).unwrap();
        assert_eq!(d.position - g.position, Vec3::new(0.5, -1.0, 2.0));
    }

    #[test]
    fn gamma_scales_each_axis() {
        let mut f = field(2);
        constant_position_heads(&mut f, [1.0, 1.0, 1.0]);
        let mut g = fg_gaussian();
        g.set_gamma(Vec3::new(3f64.ln(), 0.0, 0.0));
        let (d, _) = f.deform(&g, 0.3).unwrap();
        assert!((d.position - g.position - Vec3::new(4.0, 2.0, 2.0)).norm() < 1e-12);
        // Without gamma scaling the offset is the plain delta.
        f.use_gamma = false;
        let (d, _) = f.deform(&g, 0.3).unwrap();
        assert!((d.position - g.position - Vec3::repeat(1.0)).norm() < 1e-12);
    }

    #[test]
    fn background_uses_background_heads_unless_shared() {
        let mut f = field(3);
        constant_position_heads(&mut f, [1.0, 0.0, 0.0]);
        let bg = fg_gaussian().with_group(Group::Background);
        assert_eq!(f.deform(&bg, 0.5).unwrap().0, bg);
        f.isolate_heads = false;
        let (d, _) = f.deform(&bg, 0.5).unwrap();
        assert_eq!(d.position - bg.position, Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn deform_backward_matches_finite_differences() {
        let mut f = field(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for heads in [&mut f.heads_bg, &mut f.heads_fg] {
            heads
                .params
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let mut g = fg_gaussian();
        g.set_gamma(Vec3::new(0.2, -0.3, 0.1));
        let t = 0.41;
        // Linear functional of the deformed attributes.
        let w = GaussianGrad {
            position: Vec3::new(0.3, -0.7, 0.2),
            log_scale: Vec3::new(0.1, 0.4, -0.2),
            rotation: crate::scene::Quat::new(0.5, -0.1, 0.3, 0.2),
            opacity_logit: -0.6,
            ..Default::default()
        };
        let loss = |f: &MotionField, g: &GaussianPrimitive| {
            let (d, _) = f.deform(g, t).unwrap();
            d.position.dot(&w.position)
                + d.log_scale.dot(&w.log_scale)
                + d.rotation.dot(&w.rotation)
                + d.opacity_logit * w.opacity_logit
        };
        let (_, cache) = f.deform(&g, t).unwrap();
        let mut mg = f.zero_grads();
        let cg = f.deform_backward(&g, &cache, &w, &mut mg);
        let h = 1e-6;
        let check = |fd: f64, an: f64, what: &str| {
            assert!(
                (fd - an).abs() < 1e-7 * (1.0 + an.abs()),
                "{what}: {fd} vs {an}"
            )
        };
        for a in 0..3 {
            let mut p = g.clone();
            p.position[a] += h;
            let mut m = g.clone();
            m.position[a] -= h;
            check(
                (loss(&f, &p) - loss(&f, &m)) / (2.0 * h),
                cg.position[a],
                "position",
            );
            let mut p = g.clone();
            let mut m = g.clone();
            p.set_gamma(g.gamma().unwrap() + Vec3::from_fn(|i, _| if i == a { h } else { 0.0 }));
            m.set_gamma(g.gamma().unwrap() - Vec3::from_fn(|i, _| if i == a { h } else { 0.0 }));
            check(
                (loss(&f, &p) - loss(&f, &m)) / (2.0 * h),
                cg.gamma[a],
                "gamma",
            );
        }
        for i in (0..f.grid.data.len()).step_by(5) {
            let mut p = f.clone();
            p.grid.data[i] += h;
            let mut m = f.clone();
            m.grid.data[i] -= h;
            check(
                (loss(&p, &g) - loss(&m, &g)) / (2.0 * h),
                mg.grid[i],
                "grid",
            );
        }
        for i in 0..f.heads_fg.params.len() {
            let mut p = f.clone();
            p.heads_fg.params[i] += h;
            let mut m = f.clone();
            m.heads_fg.params[i] -= h;
            check(
                (loss(&p, &g) - loss(&m, &g)) / (2.0 * h),
                mg.heads_fg[i],
                "heads",
            );
        }
        assert!(mg.heads_bg.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn active_set_selects_one_segment() {
        let segs = segment_frames(48, 16, 3).unwrap();
        let mk = |group| fg_gaussian().with_group(group);
        let cloud = GaussianCloud::new(vec![
            mk(Group::Background),
            mk(Group::Relay(0)),
            mk(Group::Relay(1)),
            mk(Group::Relay(2)),
            mk(Group::Relay(1)),
        ]);
        assert_eq!(active_set_for_frame(&cloud, 20, &segs), vec![0, 2, 4]);
        // Frame 16 ends segment 0, frame 17 starts segment 1.
        assert_eq!(active_set_for_frame(&cloud, 16, &segs), vec![0, 1]);
        assert_eq!(active_set_for_frame(&cloud, 17, &segs), vec![0, 2, 4]);
        assert_eq!(active_set(&cloud, 1.0, &segs, 48), vec![0, 3]);
        assert_eq!(active_set(&cloud, 7.0, &segs, 48), vec![0, 3]);
        let one = segment_frames(48, 48, 3).unwrap();
        let single = GaussianCloud::new(vec![mk(Group::Background), mk(Group::Relay(0))]);
        assert_eq!(active_set(&single, 0.5, &one, 48), vec![0, 1]);
    }
}
