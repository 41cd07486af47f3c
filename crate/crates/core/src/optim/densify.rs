use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{logit, quat_to_matrix, GaussianCloud, Group, Vec3};

/// Densification and pruning settings. The split-scale thresholds are in
/// units of the scene extent passed to [`densify_and_prune`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub grad_threshold_bg: f64,
    pub grad_threshold_fg: f64,
    pub scale_split_threshold_bg: f64,
    pub scale_split_threshold_fg: f64,
    pub opacity_prune_threshold: f64,
    /// Steps between densification passes.
    pub interval: usize,
    /// Densify only while `step / stage_steps` lies in `[start_fraction, stop_fraction)`.
    pub start_fraction: f64,
    pub stop_fraction: f64,
    pub split_divisor: f64,
    /// Clones and splits stop once the cloud reaches this size.
    pub max_gaussians: usize,
    /// Reset eligible opacities to at most 0.01 every `opacity_reset_interval` steps.
    pub opacity_reset: bool,
    pub opacity_reset_interval: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            grad_threshold_bg: 2e-4,
            grad_threshold_fg: 1e-4,
            scale_split_threshold_bg: 1e-2,
            scale_split_threshold_fg: 1e-3,
            opacity_prune_threshold: 0.005,
            interval: 100,
            start_fraction: 0.0,
            stop_fraction: 0.5,
            split_divisor: 1.6,
            max_gaussians: 20_000,
            opacity_reset: false,
            opacity_reset_interval: 3000,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::config("densify interval must be positive"));
        }
        if !(self.split_divisor > 1.0) {
            return Err(Error::config("split divisor must exceed 1"));
        }
        if !(0.0..1.0).contains(&self.opacity_prune_threshold) {
            return Err(Error::config("opacity prune threshold must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn thresholds(&self, group: Group) -> (f64, f64) {
        if group.is_background() {
            (self.grad_threshold_bg, self.scale_split_threshold_bg)
        } else {
            (self.grad_threshold_fg, self.scale_split_threshold_fg)
        }
    }

    /// Whether a densification pass runs after `step` (1-based) of a stage
    /// with `stage_steps` steps.
    pub fn is_due(&self, step: usize, stage_steps: usize) -> bool {
        let frac = step as f64 / stage_steps.max(1) as f64;
        step.is_multiple_of(self.interval)
            && frac >= self.start_fraction
            && frac < self.stop_fraction
    }
}

/// Per-Gaussian view-space gradient statistics gathered between passes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_norm_sum: Vec<f64>,
    pub visible: Vec<u32>,
    /// Sum of 3D position gradients, used as the clone direction.
    pub position_grad: Vec<Vec3>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_norm_sum: vec![0.0; n],
            visible: vec![0; n],
            position_grad: vec![Vec3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    pub fn record(&mut self, i: usize, screen_grad_norm: f64, position_grad: &Vec3) {
        self.grad_norm_sum[i] += screen_grad_norm;
        self.visible[i] += 1;
        self.position_grad[i] += position_grad;
    }

    pub fn mean_grad(&self, i: usize) -> f64 {
        if self.visible[i] == 0 {
            0.0
        } else {
            self.grad_norm_sum[i] / self.visible[i] as f64
        }
    }
}

/// What a densification pass did. `source[i]` is the pre-pass index of new
/// Gaussian `i`, or `None` for newly created clones and split children.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyOutcome {
    pub source: Vec<Option<usize>>,
    pub pruned: usize,
    pub cloned: usize,
    pub split: usize,
}

/// One densification pass over the Gaussians whose group satisfies
/// `eligible`; other Gaussians are left untouched. Low-opacity Gaussians are
/// removed first, then each remaining Gaussian whose mean screen-space
/// gradient exceeds its group threshold is cloned (small) or split in two
/// (large). Survivors keep their order, new Gaussians are appended.
pub fn densify_and_prune<R: Rng>(
    cloud: &mut GaussianCloud,
    stats: &DensifyStats,
    cfg: &DensifyConfig,
    extent: f64,
    eligible: impl Fn(Group) -> bool,
    rng: &mut R,
) -> Result<DensifyOutcome> {
    if stats.len() != cloud.len() {
        return Err(Error::Internal(format!(
            "densify stats cover {} gaussians, cloud has {}",
            stats.len(),
            cloud.len()
        )));
    }
    let mut kept = Vec::with_capacity(cloud.len());
    let mut source = Vec::with_capacity(cloud.len());
    let mut born = Vec::new();
    let mut out = DensifyOutcome::default();
    let mut budget = cfg.max_gaussians.saturating_sub(cloud.len());
    let log_div = cfg.split_divisor.ln();

    for (i, g) in cloud.gaussians.iter().enumerate() {
        if !eligible(g.group()) {
            kept.push(g.clone());
            source.push(Some(i));
            continue;
        }
        if g.opacity() < cfg.opacity_prune_threshold {
            out.pruned += 1;
            // A pruned Gaussian frees room for growth.
            budget += 1;
            continue;
        }
        let (grad_t, scale_t) = cfg.thresholds(g.group());
        let grows = stats.mean_grad(i) > grad_t && budget > 0;
        let max_scale = g.scale().max();
        if grows && max_scale < scale_t * extent {
            let mut c = g.clone();
            let dir = stats.position_grad[i];
            let n = dir.norm();
            if n > 0.0 {
                c.position -= dir * (max_scale / n);
            }
            kept.push(g.clone());
            source.push(Some(i));
            born.push(c);
            out.cloned += 1;
            budget -= 1;
        } else if grows {
            let rot = quat_to_matrix(&g.rotation)?;
            let s = g.scale();
            for _ in 0..2 {
                let z = Vec3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                let mut c = g.clone();
                c.position = g.position + rot * s.component_mul(&z);
                c.log_scale = g.log_scale.add_scalar(-log_div);
                born.push(c);
            }
            out.split += 1;
            budget = budget.saturating_sub(1);
        } else {
            kept.push(g.clone());
            source.push(Some(i));
        }
    }
    source.extend(std::iter::repeat_n(None, born.len()));
    kept.extend(born);
    cloud.gaussians = kept;
    cloud.generation += 1;
    out.source = source;
    Ok(out)
}

/// Clamp the opacity of eligible Gaussians to at most `max_opacity`.
pub fn reset_opacity(
    cloud: &mut GaussianCloud,
    max_opacity: f64,
    eligible: impl Fn(Group) -> bool,
) {
    let cap = logit(max_opacity);
    for g in &mut cloud.gaussians {
        if eligible(g.group()) && g.opacity_logit > cap {
            g.opacity_logit = cap;
        }
    }
}
