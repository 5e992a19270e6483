//! Dataset ingestion, splitting, resizing and synthetic generation.

pub mod imageio;
pub mod manifest;
pub mod synth;
pub mod transform;

use std::path::Path;

pub use imageio::{load_image, load_mask, save_gray_png, save_mask_png};
pub use manifest::{DatasetManifest, ManifestEntry, Split, MANIFEST_FILE};
pub use synth::{synth_generate, synth_sample, Ellipse, Ring, SynthGeometry, SynthSample};
pub use transform::{resize_bilinear, resize_nearest, split_assignment, split_sizes};

use crate::error::{CtsError, Result};
use crate::metrics::LabelMap;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// `[C, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: LabelMap,
}

impl Sample {
    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn resized(&self, width: usize, height: usize) -> Sample {
        if width == self.width() && height == self.height() {
            return self.clone();
        }
        Sample {
            id: self.id.clone(),
            image: resize_bilinear(&self.image, width, height),
            mask: resize_nearest(&self.mask, width, height),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub classes: usize,
    pub channels: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Every sample resized to `width x height`.
    pub fn resized(&self, width: usize, height: usize) -> Dataset {
        let r = |v: &[Sample]| v.iter().map(|s| s.resized(width, height)).collect();
        Dataset {
            classes: self.classes,
            channels: self.channels,
            train: r(&self.train),
            val: r(&self.val),
            test: r(&self.test),
        }
    }

    /// Spatial extent shared by all samples, if uniform.
    pub fn uniform_size(&self) -> Option<(usize, usize)> {
        let mut it = self.train.iter().chain(&self.val).chain(&self.test).map(|s| (s.width(), s.height()));
        let first = it.next()?;
        it.all(|d| d == first).then_some(first)
    }
}

fn sample_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads and validates one manifest entry.
pub fn load_entry(manifest: &DatasetManifest, index: usize) -> Result<Sample> {
    let e = &manifest.entries[index];
    let name = || format!("entry {} ({})", index + 1, e.image.display());
    let wrap = |err: CtsError| CtsError::data(format!("{}: {}", name(), err));
    let image = load_image(&manifest.resolve(&e.image)).map_err(wrap)?;
    let mask = load_mask(&manifest.resolve(&e.mask)).map_err(wrap)?;
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if c != manifest.channels {
        return Err(CtsError::data(format!("{}: image has {} channels, manifest says {}", name(), c, manifest.channels)));
    }
    if (mask.width, mask.height) != (w, h) {
        return Err(CtsError::data(format!(
            "{}: image is {}x{} but mask is {}x{}",
            name(),
            w,
            h,
            mask.width,
            mask.height
        )));
    }
    if let Some(pos) = mask.labels.iter().position(|&l| l as usize >= manifest.classes) {
        return Err(CtsError::data(format!(
            "{}: mask label {} at row {}, col {} is outside [0, {})",
            name(),
            mask.labels[pos],
            pos / w,
            pos % w,
            manifest.classes
        )));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(CtsError::data(format!("{}: image values must lie in [0, 1]", name())));
    }
    Ok(Sample { id: sample_id(&e.image), image, mask })
}

pub fn load_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    let mut ds = Dataset {
        classes: manifest.classes,
        channels: manifest.channels,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, e) in manifest.entries.iter().enumerate() {
        let s = load_entry(manifest, i)?;
        match e.split {
            Split::Train => ds.train.push(s),
            Split::Val => ds.val.push(s),
            Split::Test => ds.test.push(s),
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests;
