//! Stage 2: copy the foreground once per temporal segment and fit each copy
//! to blended pseudo-views of its segment.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{LearningRates, PipelineConfig};
use crate::error::{Error, Result};
use crate::imaging::{GaussianFilter, Image};
use crate::metrics::Ssim;
use crate::model::Model;
use crate::optim::layout::FIELDS;
use crate::render::{render, MaskMode, RenderSettings};
use crate::scene::{FrameSet, GaussianCloud, Group, TemporalSegment, Vec3};
use crate::train::{
    render_sample, run_stage, ImageLoss, LoopOptions, Sample, SampleResult, StagePlan, StageRun,
};

/// Blend of the selected frames of one segment seen from one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoView {
    pub camera: usize,
    pub segment: usize,
    pub image: Image,
    pub frames: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Pixel-wise convex combination `Σ βᵢ·Iᵢ`. Pixels on which all inputs agree
/// are copied exactly.
pub fn build_pseudo_view(images: &[&Image], weights: &[f64]) -> Result<Image> {
    if images.is_empty() || images.len() != weights.len() {
        return Err(Error::config("one blend weight per image is required"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("blend weights sum to {sum}, not 1")));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::config("blend weights must be non-negative"));
    }
    let first = images[0];
    for img in &images[1..] {
        first.check_shape(img)?;
    }
    let mut out = first.clone();
    for (k, v) in out.data.iter_mut().enumerate() {
        let x0 = first.data[k];
        if images.iter().all(|img| img.data[k] == x0) {
            continue;
        }
        *v = images
            .iter()
            .zip(weights)
            .map(|(img, w)| w * img.data[k])
            .sum();
    }
    Ok(out)
}

/// Pseudo-views for every (camera, segment), indexed `[camera][segment]`.
pub fn build_pseudo_views(
    frames: &FrameSet,
    segments: &[TemporalSegment],
    weights: &[f64],
) -> Result<Vec<Vec<PseudoView>>> {
    let jobs: Vec<(usize, usize)> = (0..frames.cameras.len())
        .flat_map(|c| (0..segments.len()).map(move |s| (c, s)))
        .collect();
    let views = jobs
        .par_iter()
        .map(|&(c, s)| {
            let seg = &segments[s];
            if seg.selected_frames.len() != weights.len() {
                return Err(Error::config(format!(
                    "segment {} selects {} frames but {} blend weights are given",
                    seg.index,
                    seg.selected_frames.len(),
                    weights.len()
                )));
            }
            let images: Vec<&Image> = seg
                .selected_frames
                .iter()
                .map(|&f| frames.image(c, f))
                .collect();
            Ok(PseudoView {
                camera: c,
                segment: seg.index,
                image: build_pseudo_view(&images, weights)?,
                frames: seg.selected_frames.clone(),
                weights: weights.to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grid: Vec<Vec<PseudoView>> = vec![Vec::new(); frames.cameras.len()];
    for v in views {
        grid[v.camera].push(v);
    }
    Ok(grid)
}

const CACHE_MAGIC: &[u8; 4] = b"RGPV";

fn cache_key(frames: &FrameSet, segments: &[TemporalSegment], weights: &[f64]) -> String {
    let mut h = Sha256::new();
    for w in weights {
        h.update(w.to_le_bytes());
    }
    for (c, _) in frames.cameras.iter().enumerate() {
        for seg in segments {
            h.update((seg.index as u64).to_le_bytes());
            for &f in &seg.selected_frames {
                h.update((f as u64).to_le_bytes());
                for v in &frames.image(c, f).data {
                    h.update(v.to_le_bytes());
                }
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Pseudo-views loaded from `dir` when a cache for exactly these inputs
/// exists, otherwise built and written there.
pub fn cached_pseudo_views(
    dir: &Path,
    frames: &FrameSet,
    segments: &[TemporalSegment],
    weights: &[f64],
) -> Result<Vec<Vec<PseudoView>>> {
    let path: PathBuf = dir.join(format!(
        "pseudo-views-{}.bin",
        &cache_key(frames, segments, weights)[..16]
    ));
    if let Ok(bytes) = std::fs::read(&path) {
        match decode_cache(&bytes, frames, segments, weights) {
            Ok(v) => return Ok(v),
            Err(e) => log::warn!("ignoring pseudo-view cache {}: {e}", path.display()),
        }
    }
    let views = build_pseudo_views(frames, segments, weights)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = CACHE_MAGIC.to_vec();
    for row in &views {
        for v in row {
            for x in &v.image.data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(views)
}

fn decode_cache(
    bytes: &[u8],
    frames: &FrameSet,
    segments: &[TemporalSegment],
    weights: &[f64],
) -> Result<Vec<Vec<PseudoView>>> {
    if bytes.len() < 4 || &bytes[..4] != CACHE_MAGIC {
        return Err(Error::Format("bad pseudo-view cache header".into()));
    }
    let mut values = bytes[4..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut grid = Vec::with_capacity(frames.cameras.len());
    for (c, cam) in frames.cameras.iter().enumerate() {
        let mut row = Vec::with_capacity(segments.len());
        for seg in segments {
            let n = cam.width() * cam.height() * 3;
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.len() != n {
                return Err(Error::Format("truncated pseudo-view cache".into()));
            }
            row.push(PseudoView {
                camera: c,
                segment: seg.index,
                image: Image::from_data(cam.width(), cam.height(), data)?,
                frames: seg.selected_frames.clone(),
                weights: weights.to_vec(),
            });
        }
        grid.push(row);
    }
    if values.next().is_some() || !bytes[4..].len().is_multiple_of(8) {
        return Err(Error::Format("trailing data in pseudo-view cache".into()));
    }
    Ok(grid)
}

/// Replace every foreground Gaussian by one copy per segment, tagged with
/// that segment. Background Gaussians keep their place at the front; copies
/// follow segment by segment. Returns the number of copies made.
pub fn replicate_relay(cloud: &mut GaussianCloud, segments: &[TemporalSegment]) -> Result<usize> {
    if segments.is_empty() {
        return Err(Error::config(
            "relay replication needs at least one segment",
        ));
    }
    let foreground: Vec<_> = cloud
        .gaussians
        .iter()
        .filter(|g| g.group() == Group::Foreground)
        .cloned()
        .collect();
    if foreground.is_empty() {
        log::warn!("no foreground Gaussians to replicate");
    }
    let mut out: Vec<_> = cloud
        .gaussians
        .iter()
        .filter(|g| g.group() != Group::Foreground)
        .cloned()
        .collect();
    for seg in segments {
        out.extend(
            foreground
                .iter()
                .map(|g| g.clone().with_group(Group::Relay(seg.index))),
        );
    }
    cloud.gaussians = out;
    cloud.generation += 1;
    Ok(foreground.len() * segments.len())
}

/// Blur width in pixels at `step` of the coarse phase, in `levels` discrete
/// steps shrinking from `sigma` to zero over `coarse_steps` steps.
pub fn coarse_sigma(step: usize, coarse_steps: usize, sigma: f64, levels: usize) -> f64 {
    if sigma <= 0.0 || coarse_steps == 0 || levels == 0 || step > coarse_steps {
        return 0.0;
    }
    let level = ((step - 1) * levels / coarse_steps).min(levels - 1);
    sigma * (levels - level) as f64 / levels as f64
}

struct RelayPlan<'a> {
    views: &'a [Vec<PseudoView>],
    cameras: Vec<usize>,
    slots: Vec<usize>,
    settings: RenderSettings,
    loss: ImageLoss,
    lr: &'a LearningRates,
    steps: usize,
    extent: f64,
    coarse_steps: usize,
    coarse_sigma: f64,
    coarse_levels: usize,
    freeze_appearance: bool,
    coarse_rate: f64,
    /// Current blur and the pseudo-views blurred by it.
    blur: Option<(f64, GaussianFilter, Vec<Vec<Image>>)>,
    /// Background-only composite per camera. While blurred, copies are drawn
    /// over it so they cannot hide behind background surfaces.
    backdrops: Vec<Image>,
}

impl StagePlan for RelayPlan<'_> {
    fn name(&self) -> &'static str {
        "stage 2"
    }

    fn domain(&self) -> (&[usize], &[usize]) {
        (&self.cameras, &self.slots)
    }

    fn begin_step(&mut self, step: usize) -> Result<()> {
        let sigma = coarse_sigma(
            step,
            self.coarse_steps,
            self.coarse_sigma,
            self.coarse_levels,
        );
        let current = self.blur.as_ref().map(|b| b.0);
        if sigma == 0.0 {
            self.blur = None;
        } else if current != Some(sigma) {
            let filter = GaussianFilter::with_sigma(sigma);
            let blurred = self
                .views
                .par_iter()
                .map(|row| row.iter().map(|v| filter.apply(&v.image)).collect())
                .collect();
            self.blur = Some((sigma, filter, blurred));
        }
        Ok(())
    }

    fn evaluate(&self, model: &Model, sample: Sample, _step: usize) -> Result<SampleResult> {
        let seg = sample.slot;
        let coarse = self.blur.is_some();
        let indices = model.cloud.indices_where(|g| match g {
            Group::Background => !coarse,
            Group::Relay(s) => s == seg,
            Group::Foreground => false,
        });
        let gaussians: Vec<_> = indices
            .iter()
            .map(|&i| model.cloud.gaussians[i].clone())
            .collect();
        let (target, filter) = match &self.blur {
            Some((_, f, blurred)) => (&blurred[sample.camera][seg], Some(f)),
            None => {
                let v = self.views[sample.camera].get(seg).ok_or_else(|| {
                    Error::Internal(format!(
                        "missing pseudo-view for camera {} segment {seg}",
                        sample.camera
                    ))
                })?;
                (&v.image, None)
            }
        };
        let (loss, grads, _, screen) = render_sample(
            &gaussians,
            &indices,
            &model.cameras[sample.camera],
            &self.settings,
            target,
            &self.loss,
            filter,
            coarse.then(|| &self.backdrops[sample.camera]),
        )?;
        let mut grads = grads;
        if coarse {
            // One shared translation per segment.
            let mean = grads.iter().map(|g| g.position).sum::<Vec3>() / grads.len().max(1) as f64;
            grads.iter_mut().for_each(|g| g.position = mean);
        }
        let local: Vec<Option<usize>> = {
            let mut m = vec![None; model.cloud.len()];
            indices
                .iter()
                .enumerate()
                .for_each(|(k, &i)| m[i] = Some(k));
            m
        };
        Ok(SampleResult {
            loss,
            screen: screen
                .into_iter()
                .map(|(i, n)| {
                    (
                        i,
                        n,
                        local[i]
                            .map(|k| grads[k].position)
                            .unwrap_or_else(Vec3::zeros),
                    )
                })
                .collect(),
            gaussians: indices.into_iter().zip(grads).collect(),
            camera: None,
            motion: None,
        })
    }

    fn rate(&self, name: &str, step: usize) -> Option<f64> {
        let field = name.strip_prefix("relay-gaussians/")?;
        if let Some((sigma, ..)) = &self.blur {
            if field == "position" {
                let scale = if self.lr.scale_by_extent {
                    self.extent
                } else {
                    1.0
                };
                return Some(self.coarse_rate * scale * sigma / self.coarse_sigma);
            }
            if self.freeze_appearance {
                return None;
            }
        }
        debug_assert!(FIELDS.iter().any(|(f, _)| *f == field));
        self.lr.rate(name, step, self.steps, self.extent)
    }

    fn densify_eligible(&self, group: Group) -> bool {
        matches!(group, Group::Relay(_))
    }
}

/// Train the relay copies of `model` against `views` (`[camera][segment]`).
/// Background Gaussians and camera color tunes stay fixed.
pub fn stage2_train(
    model: &mut Model,
    views: &[Vec<PseudoView>],
    cameras: &[usize],
    cfg: &PipelineConfig,
    extent: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StageRun> {
    if model.cloud.count(|g| matches!(g, Group::Relay(_))) == 0 {
        log::info!("stage 2: no relay Gaussians, nothing to train");
        return Ok(StageRun::default());
    }
    let segments = model.segments.len();
    if views.iter().any(|row| row.len() != segments) {
        return Err(Error::Internal(
            "pseudo-views do not cover every segment".into(),
        ));
    }
    let steps = cfg.relay.steps;
    let mut plan = RelayPlan {
        views,
        cameras: cameras.to_vec(),
        slots: (0..segments).collect(),
        settings: cfg.render.settings().with_mask(MaskMode::Off),
        loss: ImageLoss::Photometric {
            lambda: cfg.loss.lambda,
            ssim: Ssim::new(cfg.loss.ssim_window, cfg.loss.ssim_sigma),
        },
        lr: &cfg.lr,
        steps,
        extent,
        coarse_steps: (cfg.relay.coarse_fraction * steps as f64).round() as usize,
        coarse_sigma: cfg.relay.coarse_sigma,
        coarse_levels: cfg.relay.coarse_levels,
        freeze_appearance: cfg.relay.freeze_appearance_while_coarse,
        coarse_rate: cfg.relay.coarse_position_rate,
        blur: None,
        backdrops: Vec::new(),
    };
    if plan.coarse_steps > 0 && plan.coarse_sigma > 0.0 {
        let background: Vec<_> = model
            .cloud
            .gaussians
            .iter()
            .filter(|g| g.group() == Group::Background)
            .cloned()
            .collect();
        plan.backdrops = model
            .cameras
            .par_iter()
            .map(|c| render(&background, c, &plan.settings).map(|o| o.composite))
            .collect::<Result<_>>()?;
    }
    let opts = LoopOptions {
        steps,
        batch_size: cfg.batch_size,
        densify: Some(cfg.densify.clone()),
        extent,
        deterministic: cfg.deterministic,
    };
    run_stage(model, &mut plan, &opts, rng)
}

/// Opacity-weighted mean position of the relay copies of each segment.
pub fn relay_centroids(cloud: &GaussianCloud, segments: usize) -> Vec<Option<Vec3>> {
    let mut sums = vec![(Vec3::zeros(), 0.0); segments];
    for g in &cloud.gaussians {
        if let Group::Relay(s) = g.group() {
            if s < segments {
                let w = g.opacity();
                sums[s].0 += g.position * w;
                sums[s].1 += w;
            }
        }
    }
    sums.into_iter()
        .map(|(p, w)| (w > 0.0).then(|| p / w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{segment_frames, GaussianPrimitive};
    use proptest::prelude::*;

    fn img(v: [f64; 3]) -> Image {
        Image::filled(2, 2, v)
    }

    #[test]
    fn blend_examples() {
        let (a, b, c) = (img([0.3; 3]), img([0.6; 3]), img([0.9; 3]));
        let u = [1.0 / 3.0; 3];
        let out = build_pseudo_view(&[&a, &b, &c], &u).unwrap();
        assert!(out.data.iter().all(|v| (v - 0.6).abs() < 1e-15));
        let x = Image::from_data(2, 1, vec![0.1, 0.7, 0.123456789, 0.3, 1.0 / 7.0, 0.0]).unwrap();
        assert_eq!(build_pseudo_view(&[&x, &x, &x], &u).unwrap(), x);
        assert_eq!(
            build_pseudo_view(&[&a, &b, &c], &[1.0, 0.0, 0.0]).unwrap(),
            a
        );
        assert!(build_pseudo_view(&[&a, &b, &c], &[0.5, 0.5, 0.1]).is_err());
        assert!(build_pseudo_view(&[&a, &b], &u).is_err());
    }

    proptest! {
        #[test]
        fn blending_commutes_with_affine_maps(
            px in proptest::collection::vec(0.0f64..1.0, 9),
            w in proptest::collection::vec(0.01f64..1.0, 3),
            k in -2.0f64..2.0,
            c in -1.0f64..1.0,
        ) {
            let total: f64 = w.iter().sum();
            let w: Vec<f64> = w.iter().map(|v| v / total).collect();
            let w = [w[0], w[1], 1.0 - w[0] - w[1]];
            let imgs: Vec<Image> = px.chunks(3).map(|p| Image::from_data(1, 1, p.to_vec()).unwrap()).collect();
            let mapped: Vec<Image> = imgs.iter().map(|i| Image::from_data(1, 1, i.data.iter().map(|v| k * v + c).collect()).unwrap()).collect();
            let lhs = build_pseudo_view(&mapped.iter().collect::<Vec<_>>(), &w).unwrap();
            let rhs = build_pseudo_view(&imgs.iter().collect::<Vec<_>>(), &w).unwrap();
            for (a, b) in lhs.data.iter().zip(&rhs.data) {
                prop_assert!((a - (k * b + c)).abs() < 1e-12);
            }
        }
    }

    fn fg_cloud(n_bg: usize, n_fg: usize) -> GaussianCloud {
        let mk = |x: f64, group| {
            GaussianPrimitive::new(Vec3::new(x, 0.0, 0.0), Vec3::zeros(), 0.5, Vec3::zeros())
                .with_group(group)
        };
        let mut v: Vec<_> = (0..n_bg).map(|i| mk(i as f64, Group::Background)).collect();
        v.extend((0..n_fg).map(|i| mk(100.0 + i as f64, Group::Foreground)));
        GaussianCloud::new(v)
    }

    #[test]
    fn replication_counts_and_tags() {
        let segments = segment_frames(250, 16, 3).unwrap();
        let mut cloud = fg_cloud(5, 100);
        let n = replicate_relay(&mut cloud, &segments).unwrap();
        assert_eq!(n, 1600);
        assert_eq!(cloud.len(), 1605);
        assert_eq!(cloud.count(|g| g == Group::Foreground), 0);
        for s in 0..16 {
            assert_eq!(cloud.count(|g| g == Group::Relay(s)), 100);
        }
        assert!(cloud
            .gaussians
            .iter()
            .filter(|g| g.group() != Group::Background)
            .all(|g| g.gamma().is_some()));

        let mut empty = fg_cloud(5, 0);
        assert_eq!(replicate_relay(&mut empty, &segments).unwrap(), 0);
        assert_eq!(empty.len(), 5);

        let one = segment_frames(16, 16, 3).unwrap();
        let mut c = fg_cloud(2, 3);
        replicate_relay(&mut c, &one).unwrap();
        let before = fg_cloud(2, 3);
        for (a, b) in c.gaussians[2..].iter().zip(&before.gaussians[2..]) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.group(), Group::Relay(0));
        }
        assert!(replicate_relay(&mut fg_cloud(1, 1), &[]).is_err());
    }

    #[test]
    fn coarse_schedule_shrinks_to_zero() {
        assert_eq!(coarse_sigma(1, 100, 8.0, 4), 8.0);
        assert_eq!(coarse_sigma(26, 100, 8.0, 4), 6.0);
        assert_eq!(coarse_sigma(100, 100, 8.0, 4), 2.0);
        assert_eq!(coarse_sigma(101, 100, 8.0, 4), 0.0);
        assert_eq!(coarse_sigma(1, 100, 0.0, 4), 0.0);
    }

    #[test]
    fn centroids_are_opacity_weighted() {
        let mut cloud = fg_cloud(0, 2);
        cloud.gaussians[0].set_group(Group::Relay(1));
        cloud.gaussians[1].set_group(Group::Relay(1));
        cloud.gaussians[1].opacity_logit = crate::scene::logit(0.5);
        cloud.gaussians[0].opacity_logit = crate::scene::logit(0.25);
        let c = relay_centroids(&cloud, 3);
        assert_eq!(c[0], None);
        assert!((c[1].unwrap().x - (100.0 * 0.25 + 101.0 * 0.5) / 0.75).abs() < 1e-12);
    }
}
