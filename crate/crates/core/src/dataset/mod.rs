//! Synthetic symmetry datasets: base corpora, per-class symmetry profiles,
//! rotated samples with ground-truth records, and their persistence.

mod build;
mod glyph;
mod persist;
mod profile;

pub use build::{build_dataset, split_corpus};
pub use glyph::{render_glyph_corpus, MIN_GLYPH_SIZE};
pub use persist::{load_dataset, save_dataset, IMAGES_FILE, MANIFEST_FILE};
pub use profile::{preset_profile, SymmetryProfile, PRESETS};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::format::idx::{locate_mnist, read_idx};
use crate::group::{Angle, SymmetrySpec};
use crate::image::Image;

/// Upright, unrotated images with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseCorpus {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl BaseCorpus {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::LengthMismatch {
                expected: images.len(),
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::MissingClass(bad));
        }
        Ok(Self {
            images,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Loads an MNIST-style IDX image/label pair, keeping at most `per_class`
    /// images of each of the first `n_classes` labels.
    pub fn from_idx_dir(dir: &Path, prefix: &str, n_classes: usize, per_class: usize) -> Result<Self> {
        let (img_path, lbl_path) = locate_mnist(dir, prefix)?;
        let imgs = read_idx(&img_path)?;
        let lbls = read_idx(&lbl_path)?;
        if imgs.dims.len() != 3 || lbls.dims.len() != 1 || imgs.dims[0] != lbls.dims[0] {
            return Err(Error::Shape(format!(
                "IDX images {:?} do not match labels {:?}",
                imgs.dims, lbls.dims
            )));
        }
        let (rows, cols) = (imgs.dims[1], imgs.dims[2]);
        let plane = rows * cols;
        let mut taken = vec![0usize; n_classes];
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (i, &label) in lbls.data.iter().enumerate() {
            let label = label as usize;
            if label >= n_classes || taken[label] >= per_class {
                continue;
            }
            taken[label] += 1;
            let data = imgs.data[i * plane..(i + 1) * plane]
                .iter()
                .map(|&v| v as f32 / 255.0)
                .collect();
            images.push(Image::new(rows, cols, 1, data)?);
            labels.push(label);
        }
        Self::new(images, labels, n_classes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Ground truth for one generated sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub class_id: usize,
    pub base_index: usize,
    /// Rotation applied to the upright base image.
    pub angle: Angle,
    pub spec: SymmetrySpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymDataset {
    pub images: Vec<Image>,
    pub records: Vec<SampleRecord>,
    pub split: Split,
}

impl SymDataset {
    pub fn new(images: Vec<Image>, records: Vec<SampleRecord>, split: Split) -> Result<Self> {
        if images.len() != records.len() {
            return Err(Error::LengthMismatch {
                expected: images.len(),
                actual: records.len(),
            });
        }
        Ok(Self {
            images,
            records,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.records.iter().map(|r| r.class_id + 1).max().unwrap_or(0)
    }

    /// Per-class spec as recorded in the samples.
    pub fn class_specs(&self) -> Vec<Option<SymmetrySpec>> {
        let mut specs = vec![None; self.n_classes()];
        for r in &self.records {
            specs[r.class_id].get_or_insert(r.spec);
        }
        specs
    }

    /// The first `n` samples.
    pub fn truncated(&self, n: usize) -> SymDataset {
        let n = n.min(self.len());
        SymDataset {
            images: self.images[..n].to_vec(),
            records: self.records[..n].to_vec(),
            split: self.split,
        }
    }
}
