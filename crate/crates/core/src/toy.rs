//! Procedural image sets for smoke tests and demos.
//!
//! The two-class set places a bright square patch in a class-specific
//! region (upper-left for class 0, lower-right for class 1) over a noisy
//! background, so a small CNN can separate the classes and Grad-CAM has a
//! known region to find.

use std::path::Path;

use crate::dataset::{LabeledDataset, Sample};
use crate::error::Result;
use crate::image::{write_image, Image};
use crate::rng::Rng;

pub const TOY_CLASSES: [&str; 2] = ["AD", "CN"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyConfig {
    pub size: usize,
    pub patch: usize,
    /// Background mean intensity.
    pub background: f32,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f32,
    /// Patch intensity above the background.
    pub contrast: f32,
    /// Maximum random offset of the patch from its nominal corner.
    pub jitter: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            size: 48,
            patch: 12,
            background: 0.3,
            noise: 0.08,
            contrast: 0.6,
            jitter: 4,
        }
    }
}

impl ToyConfig {
    /// Same appearance with patch and jitter scaled to `size`.
    pub fn with_size(self, size: usize) -> Self {
        Self {
            size,
            patch: (self.patch * size / self.size).max(1),
            jitter: self.jitter * size / self.size,
            ..self
        }
    }

    /// A low-contrast, noisy variant where a handful of samples per class is
    /// not enough to learn the task reliably.
    pub fn hard() -> Self {
        Self {
            contrast: 0.12,
            noise: 0.2,
            jitter: 8,
            ..Self::default()
        }
    }
}

/// Axis-aligned patch location: `x, y` of the top-left corner and side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchRect {
    pub x: usize,
    pub y: usize,
    pub size: usize,
}

impl PatchRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.size && y >= self.y && y < self.y + self.size
    }
}

#[derive(Clone, Debug)]
pub struct ToySample {
    pub image: Image,
    pub label: usize,
    pub patch: PatchRect,
}

pub fn toy_sample(label: usize, cfg: &ToyConfig, rng: &mut Rng) -> ToySample {
    let s = cfg.size;
    let margin = s / 12;
    let far = s - margin - cfg.patch - cfg.jitter;
    let (bx, by) = if label == 0 { (margin, margin) } else { (far, far) };
    let jx = rng.below(cfg.jitter + 1);
    let jy = rng.below(cfg.jitter + 1);
    let patch = PatchRect {
        x: bx + jx,
        y: by + jy,
        size: cfg.patch,
    };
    let mut pixels = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let mut v = cfg.background + cfg.noise * rng.normal() as f32;
            if patch.contains(x, y) {
                v += cfg.contrast;
            }
            pixels.push(v.clamp(0.0, 1.0));
        }
    }
    ToySample {
        image: Image {
            width: s,
            height: s,
            channels: 1,
            pixels,
        }
        .to_rgb(),
        label,
        patch,
    }
}

/// `n_per_class` samples per class, ordered class by class.
pub fn toy_samples(n_per_class: usize, cfg: &ToyConfig, rng: &mut Rng) -> Vec<ToySample> {
    (0..TOY_CLASSES.len())
        .flat_map(|label| (0..n_per_class).map(move |_| label))
        .collect::<Vec<_>>()
        .into_iter()
        .map(|label| toy_sample(label, cfg, rng))
        .collect()
}

pub fn toy_dataset(samples: &[ToySample]) -> LabeledDataset {
    LabeledDataset::from_samples(
        TOY_CLASSES.iter().map(|s| s.to_string()).collect(),
        samples
            .iter()
            .map(|t| Sample {
                path: None,
                label: t.label,
                image: t.image.clone(),
                synthetic: false,
            })
            .collect(),
    )
}

/// Write `<root>/<class>/toy_<i>.ppm`.
pub fn write_toy_dataset(root: &Path, samples: &[ToySample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let path = root
            .join(TOY_CLASSES[s.label])
            .join(format!("toy_{i:05}.ppm"));
        write_image(&path, &s.image)?;
    }
    Ok(())
}

/// A fixed grey pattern: a bright ring around a dark core with a soft
/// diagonal gradient, used as the single mode a GAN has to learn.
pub fn ring_pattern(size: usize) -> Image {
    let c = (size as f32 - 1.0) / 2.0;
    let r_out = size as f32 * 0.36;
    let r_in = size as f32 * 0.18;
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 - c;
            let dy = y as f32 - c;
            let d = (dx * dx + dy * dy).sqrt();
            let base = 0.15 + 0.2 * (x + y) as f32 / (2.0 * size as f32);
            let v = if d < r_in {
                0.1
            } else if d < r_out {
                0.9
            } else {
                base
            };
            pixels.push(v);
        }
    }
    Image {
        width: size,
        height: size,
        channels: 1,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patches_stay_in_class_regions() {
        let cfg = ToyConfig::default();
        let mut rng = Rng::new(1);
        for s in toy_samples(20, &cfg, &mut rng) {
            assert!(s.patch.x + s.patch.size <= cfg.size);
            let centre = s.patch.x + s.patch.size / 2;
            if s.label == 0 {
                assert!(centre < cfg.size / 2);
            } else {
                assert!(centre > cfg.size / 2);
            }
            assert_eq!(s.image.channels, 3);
        }
    }

    #[test]
    fn scaled_patches_stay_apart() {
        let cfg = ToyConfig::default().with_size(24);
        let mut rng = Rng::new(2);
        for s in toy_samples(10, &cfg, &mut rng) {
            let right = s.patch.x + s.patch.size;
            if s.label == 0 {
                assert!(right <= 12, "{:?}", s.patch);
            } else {
                assert!(s.patch.x >= 12, "{:?}", s.patch);
            }
        }
        assert_eq!(ToyConfig::hard().with_size(48), ToyConfig::hard());
    }

    #[test]
    fn ring_pattern_in_range() {
        let p = ring_pattern(48);
        assert!(p.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
