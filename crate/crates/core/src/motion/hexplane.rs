use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Vec3;

/// Coordinate pairs of the six planes; axis 3 is time.
pub const PLANE_AXES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HexPlaneConfig {
    pub levels: usize,
    /// Spatial resolution of the coarsest level.
    pub base_resolution: usize,
    /// Temporal resolution, shared by all levels.
    pub time_resolution: usize,
    /// Spatial resolution multiplier between consecutive levels.
    pub upsample: usize,
    pub features: usize,
    /// Spatial planes start uniform in this range; time planes start at 1.
    pub init_range: (f64, f64),
}

impl Default for HexPlaneConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            base_resolution: 32,
            time_resolution: 16,
            upsample: 2,
            features: 16,
            init_range: (0.1, 0.5),
        }
    }
}

impl HexPlaneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features == 0 || self.upsample == 0 {
            return Err(Error::config(
                "hexplane levels, features and upsample must be positive",
            ));
        }
        if self.base_resolution < 2 || self.time_resolution < 2 {
            return Err(Error::config("hexplane resolutions must be at least 2"));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct PlaneDesc {
    offset: usize,
    /// Resolution along the first and second axis.
    res: (usize, usize),
    axes: (usize, usize),
}

/// Factorized 4D feature grid: six bilinear feature planes per level whose
/// interpolated features are multiplied together, levels concatenated.
/// All features live in one flat array.
#[derive(Clone, Debug, PartialEq)]
pub struct HexPlane {
    pub config: HexPlaneConfig,
    pub bounds_min: Vec3,
    pub bounds_max: Vec3,
    pub data: Vec<f64>,
    planes: Vec<[PlaneDesc; 6]>,
}

/// Interpolation corners of one plane lookup.
#[derive(Clone, Copy, Debug, Default)]
struct Lookup {
    /// Flat offsets of the four corner feature vectors.
    corners: [usize; 4],
    weights: [f64; 4],
    /// Derivatives of the four weights w.r.t. the two plane coordinates
    /// (already scaled to world/time units; zero when clamped).
    dweights: [[f64; 4]; 2],
}

/// Everything [`HexPlane::backward`] needs about one query.
#[derive(Clone, Debug)]
pub struct EncodeCache {
    lookups: Vec<[Lookup; 6]>,
    /// Interpolated feature per level and plane, `[level][plane][feature]`.
    values: Vec<f64>,
}

fn layout(cfg: &HexPlaneConfig) -> (Vec<[PlaneDesc; 6]>, usize) {
    let mut offset = 0;
    let mut planes = Vec::with_capacity(cfg.levels);
    for level in 0..cfg.levels {
        let spatial = cfg.base_resolution * cfg.upsample.pow(level as u32);
        let res_of = |axis: usize| {
            if axis == 3 {
                cfg.time_resolution
            } else {
                spatial
            }
        };
        let descs = PLANE_AXES.map(|axes| {
            let res = (res_of(axes.0), res_of(axes.1));
            let d = PlaneDesc { offset, res, axes };
            offset += res.0 * res.1 * cfg.features;
            d
        });
        planes.push(descs);
    }
    (planes, offset)
}

impl HexPlane {
    /// Grid over the box `[bounds_min, bounds_max] × [0, 1]` with the
    /// conventional initialization.
    pub fn new<R: Rng>(
        config: HexPlaneConfig,
        bounds_min: Vec3,
        bounds_max: Vec3,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if (0..3).any(|i| !(bounds_max[i] > bounds_min[i])) {
            return Err(Error::config("hexplane bounds must have positive extent"));
        }
        let (planes, len) = layout(&config);
        let mut data = vec![1.0; len];
        let (lo, hi) = config.init_range;
        for level in &planes {
            for p in level {
                if p.axes.1 != 3 {
                    let n = p.res.0 * p.res.1 * config.features;
                    data[p.offset..p.offset + n]
                        .iter_mut()
                        .for_each(|v| *v = rng.random_range(lo..=hi));
                }
            }
        }
        Ok(Self {
            config,
            bounds_min,
            bounds_max,
            data,
            planes,
        })
    }

    /// Grid with every feature equal to `value`.
    pub fn constant(
        config: HexPlaneConfig,
        bounds_min: Vec3,
        bounds_max: Vec3,
        value: f64,
    ) -> Result<Self> {
        config.validate()?;
        let (planes, len) = layout(&config);
        Ok(Self {
            config,
            bounds_min,
            bounds_max,
            data: vec![value; len],
            planes,
        })
    }

    /// Replace the flat feature array (e.g. after loading a checkpoint).
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "hexplane expects {} features, got {}",
                self.data.len(),
                data.len()
            )));
        }
        self.data = data;
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Resolution of `plane` at `level` as (first axis, second axis).
    pub fn plane_resolution(&self, level: usize, plane: usize) -> (usize, usize) {
        self.planes[level][plane].res
    }

    /// Mutable features of node `(i, j)` (first, second axis) of a plane.
    pub fn node_mut(&mut self, level: usize, plane: usize, i: usize, j: usize) -> &mut [f64] {
        let p = self.planes[level][plane];
        let f = self.config.features;
        let o = p.offset + (j * p.res.0 + i) * f;
        &mut self.data[o..o + f]
    }

    /// Normalized coordinate along `axis` and its derivative w.r.t. the raw
    /// coordinate (zero when clamped).
    fn normalize(&self, axis: usize, x: f64) -> (f64, f64) {
        let (lo, hi) = if axis == 3 {
            (0.0, 1.0)
        } else {
            (self.bounds_min[axis], self.bounds_max[axis])
        };
        let u = (x - lo) / (hi - lo);
        if u <= 0.0 {
            (0.0, 0.0)
        } else if u >= 1.0 {
            (1.0, 0.0)
        } else {
            (u, 1.0 / (hi - lo))
        }
    }

    /// World distance from `position` to the nearest spatial cell boundary
    /// over all levels, where the interpolation weights have a kink.
    pub fn cell_boundary_distance(&self, position: &Vec3) -> f64 {
        let mut best = f64::INFINITY;
        for level in &self.planes {
            let res = level[0].res.0;
            for axis in 0..3 {
                let span = self.bounds_max[axis] - self.bounds_min[axis];
                let g = (self.normalize(axis, position[axis]).0) * (res - 1) as f64;
                best = best.min((g - g.round()).abs() * span / (res - 1) as f64);
            }
        }
        best
    }

    fn lookup(&self, p: &PlaneDesc, coords: &[f64; 4]) -> Lookup {
        let f = self.config.features;
        let mut cell = [0usize; 2];
        let mut frac = [0.0; 2];
        let mut dfrac = [0.0; 2];
        for (k, axis) in [p.axes.0, p.axes.1].into_iter().enumerate() {
            let res = if k == 0 { p.res.0 } else { p.res.1 };
            let (u, du) = self.normalize(axis, coords[axis]);
            let g = u * (res - 1) as f64;
            let i = (g.floor() as usize).min(res - 2);
            cell[k] = i;
            frac[k] = g - i as f64;
            dfrac[k] = du * (res - 1) as f64;
        }
        let idx = |i: usize, j: usize| p.offset + (j * p.res.0 + i) * f;
        let (i, j) = (cell[0], cell[1]);
        let (a, b) = (frac[0], frac[1]);
        Lookup {
            corners: [idx(i, j), idx(i + 1, j), idx(i, j + 1), idx(i + 1, j + 1)],
            weights: [(1.0 - a) * (1.0 - b), a * (1.0 - b), (1.0 - a) * b, a * b],
            dweights: [
                [
                    -(1.0 - b) * dfrac[0],
                    (1.0 - b) * dfrac[0],
                    -b * dfrac[0],
                    b * dfrac[0],
                ],
                [
                    -(1.0 - a) * dfrac[1],
                    -a * dfrac[1],
                    (1.0 - a) * dfrac[1],
                    a * dfrac[1],
                ],
            ],
        }
    }

    /// Feature vector of length `levels × features` at `(position, t)`.
    pub fn encode(&self, position: &Vec3, t: f64) -> (Vec<f64>, EncodeCache) {
        let f = self.config.features;
        let coords = [position.x, position.y, position.z, t];
        let mut out = vec![1.0; self.output_dim()];
        let mut values = vec![0.0; self.config.levels * 6 * f];
        let mut lookups = Vec::with_capacity(self.config.levels);
        for (l, level) in self.planes.iter().enumerate() {
            let mut ls = [Lookup::default(); 6];
            for (pi, p) in level.iter().enumerate() {
                let lk = self.lookup(p, &coords);
                let v = &mut values[(l * 6 + pi) * f..(l * 6 + pi + 1) * f];
                for c in 0..4 {
                    let w = lk.weights[c];
                    let src = &self.data[lk.corners[c]..lk.corners[c] + f];
                    for k in 0..f {
                        v[k] += w * src[k];
                    }
                }
                for k in 0..f {
                    out[l * f + k] *= v[k];
                }
                ls[pi] = lk;
            }
            lookups.push(ls);
        }
        (out, EncodeCache { lookups, values })
    }

    /// Accumulate `∂L/∂data` into `grad` for the query cached in `cache` and
    /// return `∂L/∂position`.
    pub fn backward(&self, cache: &EncodeCache, d_out: &[f64], grad: &mut [f64]) -> Vec3 {
        let f = self.config.features;
        let mut d_pos = Vec3::zeros();
        for (l, level) in self.planes.iter().enumerate() {
            for (pi, p) in level.iter().enumerate() {
                let lk = &cache.lookups[l][pi];
                // ∂out/∂v_p = product of the other five planes.
                let mut d_v = vec![0.0; f];
                for k in 0..f {
                    let mut others = d_out[l * f + k];
                    for q in 0..6 {
                        if q != pi {
                            others *= cache.values[(l * 6 + q) * f + k];
                        }
                    }
                    d_v[k] = others;
                }
                for c in 0..4 {
                    let w = lk.weights[c];
                    let dst = &mut grad[lk.corners[c]..lk.corners[c] + f];
                    let src = &self.data[lk.corners[c]..lk.corners[c] + f];
                    let mut dot = 0.0;
                    for k in 0..f {
                        dst[k] += w * d_v[k];
                        dot += d_v[k] * src[k];
                    }
                    for (axis_k, axis) in [p.axes.0, p.axes.1].into_iter().enumerate() {
                        if axis < 3 {
                            d_pos[axis] += dot * lk.dweights[axis_k][c];
                        }
                    }
                }
            }
        }
        d_pos
    }

    /// `weight × Σ_planes mean((adjacent difference)²)` and its gradient
    /// accumulated into `grad` (when given).
    pub fn tv_loss(&self, weight: f64, mut grad: Option<&mut [f64]>) -> f64 {
        let f = self.config.features;
        let mut total = 0.0;
        for level in &self.planes {
            for p in level {
                let (ru, rv) = p.res;
                let pairs = ((ru - 1) * rv + ru * (rv - 1)) * f;
                let scale = weight / pairs as f64;
                let at = |i: usize, j: usize| p.offset + (j * ru + i) * f;
                let mut sum = 0.0;
                for j in 0..rv {
                    for i in 0..ru {
                        let a = at(i, j);
                        let mut neighbours = [None, None];
                        if i + 1 < ru {
                            neighbours[0] = Some(at(i + 1, j));
                        }
                        if j + 1 < rv {
                            neighbours[1] = Some(at(i, j + 1));
                        }
                        for b in neighbours.into_iter().flatten() {
                            for k in 0..f {
                                let d = self.data[a + k] - self.data[b + k];
                                sum += d * d;
                                if let Some(g) = grad.as_deref_mut() {
                                    g[a + k] += 2.0 * scale * d;
                                    g[b + k] -= 2.0 * scale * d;
                                }
                            }
                        }
                    }
                }
                total += scale * sum;
            }
        }
        total
    }
}
