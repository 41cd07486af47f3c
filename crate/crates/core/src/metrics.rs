//! Image metrics and the photometric loss terms with their gradients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{from_planes, planes, GaussianFilter, Image};

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio on unit-range images; `+inf` when identical.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    })
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_shape(b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Mean absolute difference.
pub fn l1_loss(a: &Image, b: &Image) -> Result<f64> {
    a.check_shape(b)?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n)
}

/// L1 loss and its gradient w.r.t. `a` (subgradient 0 at ties).
pub fn l1_loss_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let loss = l1_loss(a, b)?;
    let n = a.data.len().max(1) as f64;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = x - y;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss, Image::from_data(a.width, a.height, data)?))
}

/// Windowed SSIM settings.
#[derive(Clone, Debug)]
pub struct Ssim {
    window: usize,
    filter: GaussianFilter,
}

impl Default for Ssim {
    fn default() -> Self {
        Self::new(11, 1.5)
    }
}

struct LocalStats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    cov: Vec<f64>,
}

/// SSIM value and the partial derivatives of the per-pixel SSIM map w.r.t.
/// the local statistics.
fn ssim_terms(s: &LocalStats, i: usize) -> (f64, f64, f64, f64) {
    let (ma, mb) = (s.mu_a[i], s.mu_b[i]);
    let a1 = 2.0 * ma * mb + C1;
    let a2 = 2.0 * s.cov[i] + C2;
    let b1 = ma * ma + mb * mb + C1;
    let b2 = s.var_a[i] + s.var_b[i] + C2;
    let v = a1 * a2 / (b1 * b2);
    let d_mu_a = 2.0 * mb * a2 / (b1 * b2) - v * 2.0 * ma / b1;
    let d_var_a = -v / b2;
    let d_cov = 2.0 * a1 / (b1 * b2);
    (v, d_mu_a, d_var_a, d_cov)
}

impl Ssim {
    pub fn new(window: usize, sigma: f64) -> Self {
        Self {
            window,
            filter: GaussianFilter::new(window, sigma),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    fn local_stats(&self, a: &[f64], b: &[f64], w: usize, h: usize) -> LocalStats {
        if w < self.window || h < self.window {
            // Whole-image window.
            let n = (w * h) as f64;
            let ma = a.iter().sum::<f64>() / n;
            let mb = b.iter().sum::<f64>() / n;
            let va = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / n;
            let vb = b.iter().map(|x| (x - mb) * (x - mb)).sum::<f64>() / n;
            let c = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - ma) * (y - mb))
                .sum::<f64>()
                / n;
            return LocalStats {
                mu_a: vec![ma],
                mu_b: vec![mb],
                var_a: vec![va],
                var_b: vec![vb],
                cov: vec![c],
            };
        }
        let f = |x: &[f64]| self.filter.apply_plane(x, w, h);
        let mu_a = f(a);
        let mu_b = f(b);
        let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
        let bb: Vec<f64> = b.iter().map(|x| x * x).collect();
        let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
        let (eaa, ebb, eab) = (f(&aa), f(&bb), f(&ab));
        let var_a = (0..w * h).map(|i| eaa[i] - mu_a[i] * mu_a[i]).collect();
        let var_b = (0..w * h).map(|i| ebb[i] - mu_b[i] * mu_b[i]).collect();
        let cov = (0..w * h).map(|i| eab[i] - mu_a[i] * mu_b[i]).collect();
        LocalStats {
            mu_a,
            mu_b,
            var_a,
            var_b,
            cov,
        }
    }

    /// Mean SSIM over pixels and channels, in `[-1, 1]`.
    pub fn ssim(&self, a: &Image, b: &Image) -> Result<f64> {
        a.check_shape(b)?;
        if a.data.is_empty() {
            return Err(Error::Shape("empty image".into()));
        }
        let (pa, pb) = (planes(a), planes(b));
        let mut total = 0.0;
        for c in 0..3 {
            let s = self.local_stats(&pa[c], &pb[c], a.width, a.height);
            let n = s.mu_a.len();
            total += (0..n).map(|i| ssim_terms(&s, i).0).sum::<f64>() / n as f64;
        }
        Ok(total / 3.0)
    }

    /// Mean SSIM and its gradient w.r.t. `a`.
    pub fn ssim_grad(&self, a: &Image, b: &Image) -> Result<(f64, Image)> {
        a.check_shape(b)?;
        if a.data.is_empty() {
            return Err(Error::Shape("empty image".into()));
        }
        let (w, h) = (a.width, a.height);
        let (pa, pb) = (planes(a), planes(b));
        let mut total = 0.0;
        let mut grad: [Vec<f64>; 3] = Default::default();
        for c in 0..3 {
            let s = self.local_stats(&pa[c], &pb[c], w, h);
            let n = s.mu_a.len();
            let scale = 1.0 / (3.0 * n as f64);
            let mut g_mu = vec![0.0; n];
            let mut g_eaa = vec![0.0; n];
            let mut g_eab = vec![0.0; n];
            let mut sum = 0.0;
            for i in 0..n {
                let (v, d_mu, d_var, d_cov) = ssim_terms(&s, i);
                sum += v;
                // var = E[a²] - μa², cov = E[ab] - μa μb.
                g_mu[i] = scale * (d_mu - 2.0 * s.mu_a[i] * d_var - s.mu_b[i] * d_cov);
                g_eaa[i] = scale * d_var;
                g_eab[i] = scale * d_cov;
            }
            total += sum / n as f64;
            grad[c] = if n == 1 {
                let np = (w * h) as f64;
                (0..w * h)
                    .map(|i| (g_mu[0] + 2.0 * pa[c][i] * g_eaa[0] + pb[c][i] * g_eab[0]) / np)
                    .collect()
            } else {
                let t_mu = self.filter.transpose_plane(&g_mu, w, h);
                let t_aa = self.filter.transpose_plane(&g_eaa, w, h);
                let t_ab = self.filter.transpose_plane(&g_eab, w, h);
                (0..w * h)
                    .map(|i| t_mu[i] + 2.0 * pa[c][i] * t_aa[i] + pb[c][i] * t_ab[i])
                    .collect()
            };
        }
        Ok((total / 3.0, from_planes(w, h, &grad)))
    }

    /// `(1 - SSIM) / 2`.
    pub fn dssim(&self, a: &Image, b: &Image) -> Result<f64> {
        Ok((1.0 - self.ssim(a, b)?) / 2.0)
    }
}

/// `(1 - λ) L1 + λ D-SSIM` and its gradient w.r.t. the rendered image.
pub fn photometric_loss_grad(
    render: &Image,
    target: &Image,
    lambda: f64,
    ssim: &Ssim,
) -> Result<(f64, Image)> {
    let (l1, mut g) = l1_loss_grad(render, target)?;
    g.data.iter_mut().for_each(|v| *v *= 1.0 - lambda);
    if lambda == 0.0 {
        return Ok(((1.0 - lambda) * l1, g));
    }
    let (s, gs) = ssim.ssim_grad(render, target)?;
    for (v, d) in g.data.iter_mut().zip(&gs.data) {
        *v -= 0.5 * lambda * d;
    }
    Ok(((1.0 - lambda) * l1 + lambda * (1.0 - s) / 2.0, g))
}

pub fn photometric_loss(render: &Image, target: &Image, lambda: f64, ssim: &Ssim) -> Result<f64> {
    let l1 = l1_loss(render, target)?;
    if lambda == 0.0 {
        return Ok(l1);
    }
    Ok((1.0 - lambda) * l1 + lambda * ssim.dssim(render, target)?)
}

/// PSNR of one evaluated view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetric {
    pub camera: usize,
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Evaluation summary written by the eval command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub views: Vec<ViewMetric>,
    /// Loss per step, keyed by stage name.
    #[serde(default)]
    pub loss_curves: BTreeMap<String, Vec<f64>>,
}

impl MetricReport {
    /// Mean PSNR is taken over per-view PSNR values, so one identical view
    /// pair alone does not make the mean infinite unless all are identical.
    pub fn from_views(views: Vec<ViewMetric>) -> Self {
        let n = views.len().max(1) as f64;
        let finite: Vec<f64> = views
            .iter()
            .map(|v| v.psnr)
            .filter(|p| p.is_finite())
            .collect();
        let mean_psnr = if views.is_empty() {
            f64::NAN
        } else if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let mean_ssim = views.iter().map(|v| v.ssim).sum::<f64>() / n;
        Self {
            mean_psnr,
            mean_ssim,
            views,
            loss_curves: BTreeMap::new(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        let data = (0..w * h * 3).map(|_| rng.random::<f64>()).collect();
        Image::from_data(w, h, data).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, [0.3, 0.3, 0.3]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::filled(4, 4, [0.4, 0.4, 0.4]);
        // MSE = 0.01.
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let z = Image::new(4, 4);
        let o = Image::filled(4, 4, [1.0; 3]);
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
        assert!(psnr(&z, &Image::new(3, 4)).is_err());
    }

    #[test]
    fn l1_examples() {
        let z = Image::new(5, 3);
        let o = Image::filled(5, 3, [1.0; 3]);
        assert_eq!(l1_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(l1_loss(&z, &o).unwrap(), 1.0);
        assert!(l1_loss(&z, &Image::new(3, 5)).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 20, 16);
        assert!((Ssim::default().ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images_match_closed_form() {
        let (a, b) = (0.3, 0.7);
        let ia = Image::filled(16, 16, [a; 3]);
        let ib = Image::filled(16, 16, [b; 3]);
        let expect = (2.0 * a * b + C1) / (a * a + b * b + C1);
        let got = Ssim::default().ssim(&ia, &ib).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn ssim_negated_structure_is_non_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 24, 24);
        let mean = a.data.iter().sum::<f64>() / a.data.len() as f64;
        let neg =
            Image::from_data(24, 24, a.data.iter().map(|v| 2.0 * mean - v).collect()).unwrap();
        // Structure (covariance) term flips sign; with near-equal luminance
        // the SSIM itself is non-positive.
        assert!(Ssim::default().ssim(&a, &neg).unwrap() <= 0.0);
    }

    #[test]
    fn small_images_use_whole_image_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 6, 5);
        let b = random_image(&mut rng, 6, 5);
        let s = Ssim::default().ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert!((Ssim::default().ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    fn check_ssim_grad(w: usize, h: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(&mut rng, w, h);
        let b = random_image(&mut rng, w, h);
        let ssim = Ssim::default();
        let (_, g) = ssim.ssim_grad(&a, &b).unwrap();
        let hstep = 1e-6;
        for idx in (0..a.data.len()).step_by(7) {
            let mut p = a.clone();
            p.data[idx] += hstep;
            let mut m = a.clone();
            m.data[idx] -= hstep;
            let fd = (ssim.ssim(&p, &b).unwrap() - ssim.ssim(&m, &b).unwrap()) / (2.0 * hstep);
            assert!(
                (fd - g.data[idx]).abs() < 1e-8 + 1e-5 * fd.abs(),
                "idx {idx}: {fd} vs {}",
                g.data[idx]
            );
        }
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        check_ssim_grad(14, 12, 4);
        check_ssim_grad(7, 6, 5);
    }

    #[test]
    fn report_round_trips_with_infinite_psnr() {
        let r = MetricReport::from_views(vec![ViewMetric {
            camera: 0,
            frame: 1,
            psnr: f64::INFINITY,
            ssim: 1.0,
        }]);
        assert_eq!(r.mean_psnr, f64::INFINITY);
        let back = MetricReport::from_toml(&r.to_toml().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn metric_properties(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, 12, 12);
            let b = random_image(&mut rng, 12, 12);
            let c = random_image(&mut rng, 12, 12);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            let s = Ssim::default();
            prop_assert!((s.ssim(&a, &b).unwrap() - s.ssim(&b, &a).unwrap()).abs() < 1e-12);
            let d = s.dssim(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            let ab = l1_loss(&a, &b).unwrap();
            let bc = l1_loss(&b, &c).unwrap();
            let ac = l1_loss(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
            // Scaling the difference scales L1 by |k|.
            let k = -2.5;
            let scaled = Image::from_data(12, 12, a.data.iter().zip(&b.data).map(|(x, y)| y + k * (x - y)).collect()).unwrap();
            prop_assert!((l1_loss(&scaled, &b).unwrap() - k.abs() * ab).abs() < 1e-12);
        }
    }
}
