//! Feature-factorized image datasets.
//!
//! Every image carries one ground-truth label per declared factor. Labels are
//! only ever consumed by evaluation; training sees pixels alone.

mod augment;
mod composite;
mod loaders;
mod raster;
mod store;
mod synthetic;
mod trifeature;

pub use augment::{augment_pair, augment_view, AugmentationConfig};
pub use composite::generate_composite;
pub use loaders::{load_cifar_binary, load_idx, write_cifar_binary, write_idx};
pub use store::{load_dataset, save_dataset, DatasetManifest};
pub use synthetic::{generate_digits, generate_objects, SourceConfig};
pub use trifeature::{generate_trifeature, TrifeatureConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A discrete ground-truth factor of variation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub cardinality: usize,
}

impl FactorSpec {
    pub fn new(name: impl Into<String>, cardinality: usize) -> Self {
        Self {
            name: name.into(),
            cardinality,
        }
    }
}

/// A channels x height x width image with values in `[0, 1]`, stored planar.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Data(format!(
                "pixel buffer has {} values, expected {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Bilinear resize to `size x size`, sampling at pixel centres.
    pub fn resized(&self, size: usize) -> Image {
        if size == self.height && size == self.width {
            return self.clone();
        }
        let mut out = Image::zeros(self.channels, size, size);
        let sy = self.height as f32 / size as f32;
        let sx = self.width as f32 / size as f32;
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for oy in 0..size {
                let fy = (oy as f32 + 0.5) * sy - 0.5;
                for ox in 0..size {
                    let fx = (ox as f32 + 0.5) * sx - 0.5;
                    dst[oy * size + ox] = bilinear(src, self.height, self.width, fy, fx);
                }
            }
        }
        out
    }

    pub fn is_bounded(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Samples a plane at fractional coordinates, clamping to the border.
#[inline]
pub(crate) fn bilinear(plane: &[f32], height: usize, width: usize, fy: f32, fx: f32) -> f32 {
    let fy = fy.clamp(0.0, (height - 1) as f32);
    let fx = fx.clamp(0.0, (width - 1) as f32);
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let ty = fy - y0 as f32;
    let tx = fx - x0 as f32;
    let top = plane[y0 * width + x0] * (1.0 - tx) + plane[y0 * width + x1] * tx;
    let bottom = plane[y1 * width + x0] * (1.0 - tx) + plane[y1 * width + x1] * tx;
    top * (1.0 - ty) + bottom * ty
}

/// One image with its per-factor labels, ordered like the owning dataset's factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Image,
    pub factor_labels: Vec<usize>,
    pub sample_index: usize,
}

/// A collection of equally shaped labelled images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub factors: Vec<FactorSpec>,
    pub images: Vec<LabeledImage>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(channels, height, width)` of the first image, or zeros when empty.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.images
            .first()
            .map(|im| (im.pixels.channels, im.pixels.height, im.pixels.width))
            .unwrap_or((0, 0, 0))
    }

    pub fn factor_index(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.name == name)
    }

    /// Labels of one factor for every sample, in dataset order.
    pub fn factor_labels(&self, name: &str) -> Result<Vec<usize>> {
        let idx = self
            .factor_index(name)
            .ok_or_else(|| Error::Data(format!("unknown factor {name:?}")))?;
        Ok(self.images.iter().map(|im| im.factor_labels[idx]).collect())
    }

    /// Checks factor declarations, label completeness, shapes and pixel bounds.
    pub fn validate(&self) -> Result<()> {
        let mut names = std::collections::HashSet::new();
        for f in &self.factors {
            if f.cardinality < 2 {
                return Err(Error::Config(format!(
                    "factor {:?} has cardinality {} (< 2)",
                    f.name, f.cardinality
                )));
            }
            if !names.insert(f.name.as_str()) {
                return Err(Error::Config(format!("duplicate factor name {:?}", f.name)));
            }
        }
        let shape = self.shape();
        for (i, im) in self.images.iter().enumerate() {
            let s = (im.pixels.channels, im.pixels.height, im.pixels.width);
            if s != shape {
                return Err(Error::Data(format!(
                    "image {i} has shape {s:?}, dataset shape is {shape:?}"
                )));
            }
            if im.factor_labels.len() != self.factors.len() {
                return Err(Error::Data(format!(
                    "image {i} has {} labels for {} factors",
                    im.factor_labels.len(),
                    self.factors.len()
                )));
            }
            for (label, f) in im.factor_labels.iter().zip(&self.factors) {
                if *label >= f.cardinality {
                    return Err(Error::Data(format!(
                        "image {i}: label {label} out of range for factor {:?}",
                        f.name
                    )));
                }
            }
            if !im.pixels.is_bounded() {
                return Err(Error::Data(format!("image {i} has pixels outside [0, 1]")));
            }
        }
        Ok(())
    }
}
