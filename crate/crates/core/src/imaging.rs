//! Float RGB images and the separable Gaussian filter used by SSIM and
//! coarse-to-fine supervision.

use crate::error::{Error, Result};

/// Interleaved RGB image with `f64` channels, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn clamped(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Quantize to 8-bit RGB (round to nearest).
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Self::from_data(width, height, data)
    }
}

/// Normalized 1D Gaussian kernel of odd length `size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter with border renormalization: near the border the
/// kernel is restricted to in-bounds taps and rescaled to unit mass, so a
/// constant image stays exactly constant.
#[derive(Clone, Debug)]
pub struct GaussianFilter {
    kernel: Vec<f64>,
}

impl GaussianFilter {
    pub fn new(size: usize, sigma: f64) -> Self {
        assert!(size % 2 == 1, "filter size must be odd");
        Self {
            kernel: gaussian_kernel(size, sigma),
        }
    }

    /// Kernel radius large enough for `sigma` (3 sigma, at least 1).
    pub fn with_sigma(sigma: f64) -> Self {
        let radius = (3.0 * sigma).ceil().max(1.0) as usize;
        Self::new(2 * radius + 1, sigma)
    }

    pub fn size(&self) -> usize {
        self.kernel.len()
    }

    fn mass(&self, len: usize) -> Vec<f64> {
        let half = (self.kernel.len() / 2) as isize;
        (0..len as isize)
            .map(|i| {
                (-half..=half)
                    .filter(|o| (0..len as isize).contains(&(i + o)))
                    .map(|o| self.kernel[(o + half) as usize])
                    .sum()
            })
            .collect()
    }

    fn pass(&self, src: &[f64], dst: &mut [f64], w: usize, h: usize, horizontal: bool) {
        let half = (self.kernel.len() / 2) as isize;
        let (len, other) = if horizontal { (w, h) } else { (h, w) };
        for o in 0..other {
            for i in 0..len {
                let mut acc = 0.0;
                for (ki, kv) in self.kernel.iter().enumerate() {
                    let j = i as isize + ki as isize - half;
                    if j < 0 || j >= len as isize {
                        continue;
                    }
                    let j = j as usize;
                    let idx = if horizontal { o * w + j } else { j * w + o };
                    acc += kv * src[idx];
                }
                let idx = if horizontal { o * w + i } else { i * w + o };
                dst[idx] = acc;
            }
        }
    }

    /// Filter a single-channel plane (`w * h` values).
    pub fn apply_plane(&self, src: &[f64], w: usize, h: usize) -> Vec<f64> {
        let mx = self.mass(w);
        let my = self.mass(h);
        let mut tmp = vec![0.0; w * h];
        let mut out = vec![0.0; w * h];
        self.pass(src, &mut tmp, w, h, true);
        self.pass(&tmp, &mut out, w, h, false);
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] /= mx[x] * my[y];
            }
        }
        out
    }

    /// Adjoint of [`apply_plane`](Self::apply_plane).
    pub fn transpose_plane(&self, grad: &[f64], w: usize, h: usize) -> Vec<f64> {
        let mx = self.mass(w);
        let my = self.mass(h);
        let scaled: Vec<f64> = (0..w * h)
            .map(|i| grad[i] / (mx[i % w] * my[i / w]))
            .collect();
        let mut tmp = vec![0.0; w * h];
        let mut out = vec![0.0; w * h];
        // The kernel is symmetric, so the adjoint of each pass is the same pass.
        self.pass(&scaled, &mut tmp, w, h, false);
        self.pass(&tmp, &mut out, w, h, true);
        out
    }

    pub fn apply(&self, img: &Image) -> Image {
        map_channels(img, |plane| self.apply_plane(plane, img.width, img.height))
    }

    pub fn transpose(&self, grad: &Image) -> Image {
        map_channels(grad, |plane| {
            self.transpose_plane(plane, grad.width, grad.height)
        })
    }
}

/// Split an interleaved image into three planes.
pub fn planes(img: &Image) -> [Vec<f64>; 3] {
    let mut out = [
        Vec::with_capacity(img.width * img.height),
        Vec::with_capacity(img.width * img.height),
        Vec::with_capacity(img.width * img.height),
    ];
    for px in img.data.chunks_exact(3) {
        for c in 0..3 {
            out[c].push(px[c]);
        }
    }
    out
}

pub fn from_planes(width: usize, height: usize, p: &[Vec<f64>; 3]) -> Image {
    let mut img = Image::new(width, height);
    for i in 0..width * height {
        for c in 0..3 {
            img.data[i * 3 + c] = p[c][i];
        }
    }
    img
}

fn map_channels(img: &Image, f: impl Fn(&[f64]) -> Vec<f64>) -> Image {
    let p = planes(img);
    let out = [f(&p[0]), f(&p[1]), f(&p[2])];
    from_planes(img.width, img.height, &out)
}
