//! Directory-per-class datasets with a stratified train/validation split.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use crate::error::{Error, Result};
use crate::image::{normalize, read_image, resize_bilinear, Image, DEFAULT_MEAN, DEFAULT_STD};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub path: Option<PathBuf>,
    pub label: usize,
    pub image: Image,
    pub synthetic: bool,
}

#[derive(Clone, Debug, Default)]
pub struct LabeledDataset {
    /// Sorted lexicographically; index is the label.
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub const DEFAULT_VAL_FRACTION: f64 = 0.2;

/// Regular, non-hidden files directly under `dir`, sorted by name.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with('.') {
            continue;
        }
        let path = entry.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn list_class_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if path.is_dir() && !name.starts_with('.') {
            dirs.push((name, path));
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Decode every file in `dir`, skipping (and logging) undecodable ones.
/// Fails with `EmptyDataset` when nothing decodes.
pub fn load_folder(dir: &Path, label: usize) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for path in list_files(dir)? {
        match read_image(&path) {
            Ok(image) => samples.push(Sample {
                path: Some(path),
                label,
                image,
                synthetic: false,
            }),
            Err(e) => warn!("skipping {}: {e}", path.display()),
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no decodable images in {}",
            dir.display()
        )));
    }
    Ok(samples)
}

/// Load `<root>/<class>/<files>` without splitting. Labels follow the
/// sorted class-folder names.
pub fn load_images(root: &Path) -> Result<LabeledDataset> {
    let dirs = list_class_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no class folders under {}",
            root.display()
        )));
    }
    let mut samples = Vec::new();
    let mut class_names = Vec::with_capacity(dirs.len());
    for (label, (name, path)) in dirs.into_iter().enumerate() {
        samples.extend(load_folder(&path, label)?);
        class_names.push(name);
    }
    Ok(LabeledDataset::from_samples(class_names, samples))
}

/// Load and split with `split_fraction` of each class held out for
/// validation (rounded down).
pub fn load_dataset(root: &Path, split_fraction: f64, rng: &mut Rng) -> Result<LabeledDataset> {
    let mut ds = load_images(root)?;
    ds.split_stratified(split_fraction, rng)?;
    Ok(ds)
}

impl LabeledDataset {
    /// All samples in the training split.
    pub fn from_samples(class_names: Vec<String>, samples: Vec<Sample>) -> Self {
        let train = (0..samples.len()).collect();
        Self {
            class_names,
            samples,
            train,
            val: Vec::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices_of_class(&self, label: usize) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].label == label)
            .collect()
    }

    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &i in indices {
            counts[self.samples[i].label] += 1;
        }
        counts
    }

    /// Per class, shuffle with `rng` and hold out `floor(n·fraction)`
    /// samples for validation. Both index lists end up sorted.
    pub fn split_stratified(&mut self, fraction: f64, rng: &mut Rng) -> Result<()> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Domain(format!("split fraction {fraction} not in [0,1)")));
        }
        let mut train = Vec::new();
        let mut val = Vec::new();
        for label in 0..self.num_classes() {
            let mut idx = self.indices_of_class(label);
            rng.shuffle(&mut idx);
            let n_val = (idx.len() as f64 * fraction).floor() as usize;
            val.extend_from_slice(&idx[..n_val]);
            train.extend_from_slice(&idx[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        self.train = train;
        self.val = val;
        Ok(())
    }

    /// Apply `f` to every image.
    pub fn map_images(mut self, f: impl Fn(&Image) -> Result<Image>) -> Result<Self> {
        for s in &mut self.samples {
            s.image = f(&s.image)?;
        }
        Ok(self)
    }

    /// Resize every image to `size×size` RGB.
    pub fn to_rgb_square(self, size: usize) -> Result<Self> {
        self.map_images(|img| resize_bilinear(&img.to_rgb(), size, size))
    }
}

/// A model-ready sample: normalised `[C,H,W]` tensor and its label.
#[derive(Clone, Debug)]
pub struct Example {
    pub input: Tensor<f32>,
    pub label: usize,
}

/// Resize to `size×size` RGB and normalise to `[-1, 1]`.
pub fn prepare_example(img: &Image, label: usize, size: usize) -> Result<Example> {
    let img = if img.width == size && img.height == size && img.channels == 3 {
        img.clone()
    } else {
        resize_bilinear(&img.to_rgb(), size, size)?
    };
    Ok(Example {
        input: normalize(&img, DEFAULT_MEAN, DEFAULT_STD)?,
        label,
    })
}

pub fn prepare_examples(ds: &LabeledDataset, indices: &[usize], size: usize) -> Result<Vec<Example>> {
    indices
        .iter()
        .map(|&i| {
            let s = &ds.samples[i];
            prepare_example(&s.image, s.label, size)
        })
        .collect()
}
