//! Structural similarity over single-channel images.
//!
//! Local moments come from an 11×11 Gaussian window (σ = 1.5) applied at
//! every position where it fits entirely inside the image; the score is the
//! mean of the per-window index. All arithmetic is in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{rgb_to_luma, Image};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the pixel values.
    pub dynamic_range: f64,
    pub window: usize,
    pub sigma: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            window: 11,
            sigma: 1.5,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Structure-term constant; with `C3 = C2/2` the contrast and structure
    /// terms merge into the single factor used by [`ssim`].
    pub fn c3(&self) -> f64 {
        self.c2() / 2.0
    }

    /// Normalised 1-D Gaussian taps. The 2-D window is their outer product
    /// and therefore also sums to one.
    pub fn kernel_1d(&self) -> Vec<f64> {
        let r = (self.window as f64 - 1.0) / 2.0;
        let taps: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = taps.iter().sum();
        taps.into_iter().map(|t| t / s).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0 && self.window > 0 && self.sigma > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid SSIM parameters {self:?}")))
        }
    }
}

/// Per-window SSIM values, row-major over the valid positions.
#[derive(Clone, Debug, PartialEq)]
pub struct SsimMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl SsimMap {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

fn check_pair(x: &Image, y: &Image, p: &SsimParams) -> Result<()> {
    p.validate()?;
    if x.channels != 1 || y.channels != 1 {
        return Err(Error::Shape(format!(
            "ssim expects single-channel images, got {} and {} channels",
            x.channels, y.channels
        )));
    }
    if (x.width, x.height) != (y.width, y.height) {
        return Err(Error::Shape(format!(
            "ssim size mismatch {}×{} vs {}×{}",
            x.width, x.height, y.width, y.height
        )));
    }
    if x.width < p.window || x.height < p.window {
        return Err(Error::Domain(format!(
            "{}×{} image smaller than the {}×{} window",
            x.width, x.height, p.window, p.window
        )));
    }
    Ok(())
}

/// Valid separable filtering of a `w×h` plane with `k` along both axes.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&line[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

pub fn ssim_map(x: &Image, y: &Image, p: &SsimParams) -> Result<SsimMap> {
    check_pair(x, y, p)?;
    let (w, h) = (x.width, x.height);
    let k = p.kernel_1d();
    let xs: Vec<f64> = x.pixels.iter().map(|&v| v as f64).collect();
    let ys: Vec<f64> = y.pixels.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
    let mx = filter_valid(&xs, w, h, &k);
    let my = filter_valid(&ys, w, h, &k);
    let sxx = filter_valid(&xx, w, h, &k);
    let syy = filter_valid(&yy, w, h, &k);
    let sxy = filter_valid(&xy, w, h, &k);
    let (c1, c2) = (p.c1(), p.c2());
    let values = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .collect();
    Ok(SsimMap {
        width: w - p.window + 1,
        height: h - p.window + 1,
        values,
    })
}

/// Mean SSIM between two equally sized single-channel images of at least
/// window size.
pub fn ssim(x: &Image, y: &Image, p: &SsimParams) -> Result<f64> {
    Ok(ssim_map(x, y, p)?.mean())
}

/// SSIM on the luma of two images of any channel count.
pub fn ssim_luma(x: &Image, y: &Image, p: &SsimParams) -> Result<f64> {
    ssim(&rgb_to_luma(x), &rgb_to_luma(y), p)
}
