use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output sizes of the position, rotation, scale and opacity heads.
pub const HEAD_DIMS: [usize; 4] = [3, 4, 3, 1];
const OUT: usize = 11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadsConfig {
    pub hidden: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self { hidden: 64 }
    }
}

/// Attribute deltas predicted for one Gaussian.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Deltas {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity: f64,
}

impl Deltas {
    fn from_slice(v: &[f64]) -> Self {
        Self {
            position: [v[0], v[1], v[2]],
            rotation: [v[3], v[4], v[5], v[6]],
            log_scale: [v[7], v[8], v[9]],
            opacity: v[10],
        }
    }

    fn to_array(self) -> [f64; OUT] {
        let mut o = [0.0; OUT];
        o[..3].copy_from_slice(&self.position);
        o[3..7].copy_from_slice(&self.rotation);
        o[7..10].copy_from_slice(&self.log_scale);
        o[10] = self.opacity;
        o
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// One ReLU trunk layer followed by four linear heads, stacked into a single
/// `hidden → 11` output layer. Parameters are one flat array:
/// trunk weights (`hidden × input`, row major), trunk bias, head weights
/// (`11 × hidden`), head bias.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationHeads {
    pub input: usize,
    pub hidden: usize,
    pub params: Vec<f64>,
}

/// Hidden activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct HeadsCache {
    hidden: Vec<f64>,
}

impl DeformationHeads {
    /// Trunk uniform in `±1/√input`; heads zero, so the deltas start at zero.
    pub fn new<R: Rng>(input: usize, cfg: &HeadsConfig, rng: &mut R) -> Result<Self> {
        if input == 0 || cfg.hidden == 0 {
            return Err(Error::config("deformation heads need positive sizes"));
        }
        let h = cfg.hidden;
        let bound = 1.0 / (input as f64).sqrt();
        let mut params = vec![0.0; Self::param_count(input, h)];
        for v in &mut params[..h * input + h] {
            *v = rng.random_range(-bound..bound);
        }
        Ok(Self {
            input,
            hidden: h,
            params,
        })
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        hidden * input + hidden + OUT * hidden + OUT
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "heads expect {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input;
        let w2 = b1 + self.hidden;
        let b2 = w2 + OUT * self.hidden;
        (b1, w2, b2)
    }

    /// Trunk pre-activations for `feature`.
    pub fn preactivations(&self, feature: &[f64]) -> Vec<f64> {
        let (b1, _, _) = self.offsets();
        let n = self.input;
        let p = &self.params;
        (0..self.hidden)
            .map(|j| {
                p[b1 + j]
                    + p[j * n..(j + 1) * n]
                        .iter()
                        .zip(feature)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn forward(&self, feature: &[f64]) -> (Deltas, HeadsCache) {
        let (_, w2, b2) = self.offsets();
        let h = self.hidden;
        let p = &self.params;
        let hidden: Vec<f64> = self
            .preactivations(feature)
            .into_iter()
            .map(|z| z.max(0.0))
            .collect();
        let mut out = [0.0; OUT];
        for (o, v) in out.iter_mut().enumerate() {
            let row = &p[w2 + o * h..w2 + (o + 1) * h];
            *v = p[b2 + o] + row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>();
        }
        (Deltas::from_slice(&out), HeadsCache { hidden })
    }

    /// Accumulate parameter gradients into `grad` and return `∂L/∂feature`.
    pub fn backward(
        &self,
        feature: &[f64],
        cache: &HeadsCache,
        d_out: &Deltas,
        grad: &mut [f64],
    ) -> Vec<f64> {
        let (b1, w2, b2) = self.offsets();
        let (n, h) = (self.input, self.hidden);
        let d = d_out.to_array();
        let mut d_hidden = vec![0.0; h];
        for (o, &g) in d.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[b2 + o] += g;
            for j in 0..h {
                grad[w2 + o * h + j] += g * cache.hidden[j];
                d_hidden[j] += g * self.params[w2 + o * h + j];
            }
        }
        let mut d_feature = vec![0.0; n];
        for j in 0..h {
            // ReLU: the gradient passes where the activation is positive.
            if cache.hidden[j] <= 0.0 || d_hidden[j] == 0.0 {
                continue;
            }
            let g = d_hidden[j];
            grad[b1 + j] += g;
            for i in 0..n {
                grad[j * n + i] += g * feature[i];
                d_feature[i] += g * self.params[j * n + i];
            }
        }
        d_feature
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_heads_output_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let heads = DeformationHeads::new(8, &HeadsConfig::default(), &mut rng).unwrap();
        let (d, _) = heads.forward(&[0.3; 8]);
        assert_eq!(d, Deltas::default());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut heads = DeformationHeads::new(5, &HeadsConfig { hidden: 7 }, &mut rng).unwrap();
        heads
            .params
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        let feature: Vec<f64> = (0..5).map(|i| 0.1 + 0.2 * i as f64).collect();
        let w: [f64; OUT] = std::array::from_fn(|i| (i as f64 - 5.0) * 0.3);
        let loss = |h: &DeformationHeads, f: &[f64]| {
            h.forward(f)
                .0
                .to_array()
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let (_, cache) = heads.forward(&feature);
        let mut grad = vec![0.0; heads.params.len()];
        let d_feat = heads.backward(&feature, &cache, &Deltas::from_slice(&w), &mut grad);
        let h = 1e-6;
        for i in 0..heads.params.len() {
            let mut p = heads.clone();
            p.params[i] += h;
            let mut m = heads.clone();
            m.params[i] -= h;
            let fd = (loss(&p, &feature) - loss(&m, &feature)) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() < 1e-7,
                "param {i}: {fd} vs {}",
                grad[i]
            );
        }
        for i in 0..5 {
            let mut p = feature.clone();
            p[i] += h;
            let mut m = feature.clone();
            m[i] -= h;
            let fd = (loss(&heads, &p) - loss(&heads, &m)) / (2.0 * h);
            assert!((fd - d_feat[i]).abs() < 1e-7);
        }
    }
}
